//! Invertible layers and the multi-scale conditional flow.
//!
//! Direction convention: `forward` maps data `y` to latent `z` and returns
//! `log|det ∂z/∂y|` per batch item; `inverse` maps back and returns the
//! log-determinant of its own direction, so for any layer
//! `forward(y).logdet == -inverse(forward(y).z).logdet`.

mod conditioner;
mod layers;
mod model;
pub mod oracle;
mod prior;

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndtensor::{Scalar, Tensor, Var};

use crate::error::{FlowError, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub use conditioner::Conditioner;
pub use layers::{affine_couple, ActNorm, AffineCoupling, ContextAffine, InstanceNormFlow, InvConv1x1, Squeeze};
pub use model::{
    ActivationNorm, CondShape, Encoded, FlowModel, Latents, ModelConfig, Step, Variant,
};
pub use prior::{gaussian_log_prob, Prior, SplitPrior};

/// How stateful layers treat the current pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Use stored parameters and running statistics.
    Eval,
    /// Instance norm uses per-sample statistics and records running-stat
    /// updates.
    Train,
    /// Data-dependent initialisation: ActNorm derives its parameters from
    /// the activations it sees and records them.
    Init,
}

/// Conditioning features keyed by spatial resolution, plus the pass mode.
pub struct Context<'t, T: Scalar> {
    features: BTreeMap<(usize, usize), Var<'t, T>>,
    raw_x: Option<Var<'t, T>>,
    pub mode: Mode,
    records: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, T: Scalar> Context<'t, T> {
    pub fn unconditional(mode: Mode) -> Self {
        Self {
            features: BTreeMap::new(),
            raw_x: None,
            mode,
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn new(raw_x: Option<Var<'t, T>>, features: Vec<Var<'t, T>>, mode: Mode) -> Self {
        let mut ctx = Self::unconditional(mode);
        ctx.raw_x = raw_x;
        for f in features {
            let s = f.shape();
            ctx.features.insert((s[2], s[3]), f);
        }
        ctx
    }

    pub fn is_conditional(&self) -> bool {
        !self.features.is_empty()
    }

    pub fn raw_x(&self) -> Option<Var<'t, T>> {
        self.raw_x
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.features.keys().copied().collect()
    }

    /// Features matching an activation of spatial size `h × w`. `None` for an
    /// unconditional context; an error if conditional but nothing matches.
    pub fn feature(&self, h: usize, w: usize) -> Result<Option<Var<'t, T>>> {
        if self.features.is_empty() {
            return Ok(None);
        }
        match self.features.get(&(h, w)) {
            Some(v) => Ok(Some(*v)),
            None => Err(FlowError::Config(format!(
                "no conditioning features at resolution {}x{} (have {:?})",
                h,
                w,
                self.resolutions()
            ))),
        }
    }

    pub(crate) fn record(&self, id: ParamId, value: Tensor<T>) {
        self.records.borrow_mut().push((id, value));
    }

    /// Parameter and buffer values produced during the pass (initialisation
    /// results, running statistics), in recording order.
    pub fn take_records(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.records.borrow_mut())
    }

    /// Writes recorded values into `store`.
    pub fn apply_records(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, value) in self.take_records() {
            store.set(id, value)?;
        }
        Ok(())
    }
}

/// One invertible layer. Layers hold [`ParamId`]s; values come from a
/// [`Bound`] store so the same layer runs on any tape.
pub trait FlowLayer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)>;

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)>;

    /// Output shape for an input of shape `[C, H, W]`.
    fn output_shape(&self, chw: [usize; 3]) -> [usize; 3] {
        chw
    }
}

/// Broadcasts a rank-0 log-determinant to one entry per batch item.
pub(crate) fn per_item<'t, T: Scalar>(value: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    Ok(value.tape().constant(Tensor::zeros([n])).add(&value)?)
}

pub(crate) fn zeros_per_item<'t, T: Scalar>(like: Var<'t, T>) -> Var<'t, T> {
    let n = like.shape()[0];
    like.tape().constant(Tensor::zeros([n]))
}

/// Attributes numerical failures inside `f` to the named layer and rejects
/// non-finite outputs.
pub(crate) fn checked<'t, T: Scalar>(
    layer: &str,
    out: Result<(Var<'t, T>, Var<'t, T>)>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (z, ld) = out.map_err(|e| e.in_layer(layer))?;
    if !z.value().is_finite() || !ld.value().is_finite() {
        return Err(FlowError::NonFinite {
            layer: layer.to_string(),
            detail: "output contains NaN or infinity".into(),
        });
    }
    Ok((z, ld))
}

/// Adds Gaussian noise of standard deviation `scale` to every trainable
/// tensor. Test helper: freshly built layers are identity maps (zero-init
/// output convs), which would make most oracles vacuous.
pub fn perturb_params<T: Scalar>(store: &mut ParamStore<T>, scale: f64, rng: &mut impl rand::Rng) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.params()[id.index()].trainable).collect();
    for id in ids {
        let noise = crate::rng::randn::<T>(rng, store.get(id).shape());
        let value = store
            .get(id)
            .zip_map(&noise, |a, b| a + T::of(scale) * b)
            .expect("same shape");
        store.set(id, value).expect("same shape");
    }
}
