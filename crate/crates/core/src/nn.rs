//! Plain (non-invertible) network pieces used inside flow layers,
//! conditioners and baselines.

use ndtensor::{Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::randn;

/// Kernel side for a feature map: 3×3 where there is a neighbourhood,
/// 1×1 on single-pixel maps (where a 3×3 kernel only ever sees its centre).
pub fn kernel_for(height: usize, width: usize) -> usize {
    if height == 1 && width == 1 {
        1
    } else {
        3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// All zeros; the layer starts out as the constant 0.
    Zeros,
}

/// Same-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::He => {
                let fan_in = (in_channels * kernel * kernel).max(1) as f64;
                let std = T::of((2.0 / fan_in).sqrt());
                randn::<T>(rng, &shape).map(|v| v * std)
            }
            Init::Zeros => Tensor::zeros(shape),
        };
        Self {
            weight: store.add(&format!("{}.weight", name), weight),
            bias: store.add(&format!("{}.bias", name), Tensor::zeros([1, out_channels, 1, 1])),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let pad = (self.kernel - 1) / 2;
        Ok(x.conv2d(&p[self.weight], (pad, pad), (1, 1))?.add(&p[self.bias])?)
    }
}

/// Per-sample, per-channel normalisation over the spatial axes (no affine).
pub fn instance_norm<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let mean = x.mean_axes(&[2, 3], true)?;
    let centred = x.sub(&mean)?;
    let var = centred.square()?.mean_axes(&[2, 3], true)?;
    let std = var.add_scalar(T::of(1e-5))?.sqrt()?;
    Ok(centred.div(&std)?)
}

/// `conv → [instance norm] → relu → conv`, with the last conv zero-initialised
/// so a fresh net outputs zeros.
#[derive(Clone, Debug)]
pub struct TwoLayerNet {
    pub first: Conv,
    pub last: Conv,
    pub norm: bool,
}

impl TwoLayerNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        kernel: usize,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Conv::new(store, &format!("{}.conv1", name), in_channels, hidden, kernel, Init::He, rng),
            last: Conv::new(store, &format!("{}.conv2", name), hidden, out_channels, kernel, Init::Zeros, rng),
            norm,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = self.first.forward(p, x)?;
        if self.norm {
            h = instance_norm(h)?;
        }
        self.last.forward(p, h.relu()?)
    }
}
