use ndtensor::{Scalar, Var};
use rand::Rng;

use crate::error::{config_err, Result};
use crate::nn::{kernel_for, Conv, Init};
use crate::params::{Bound, ParamStore};

/// Conditioning network `h = g(x)`: a two-conv stem at the input resolution,
/// then one max-pool and conv per halving, yielding a feature map for every
/// resolution the flow visits.
#[derive(Clone, Debug)]
pub struct Conditioner {
    stem: [Conv; 2],
    downs: Vec<Conv>,
    features: usize,
}

impl Conditioner {
    /// `input` is `[C, H, W]` of `x`; `needed` lists the activation
    /// resolutions that must find features.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: [usize; 3],
        features: usize,
        needed: &[(usize, usize)],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let mut halvings = 0;
        for &(nh, nw) in needed {
            let k = (0..16).find(|&k| h >> k == nh && w >> k == nw && (h % (1 << k) == 0) && (w % (1 << k) == 0));
            match k {
                Some(k) => halvings = halvings.max(k),
                None => {
                    return config_err(format!(
                        "conditioning input {}x{} cannot produce features at {}x{} by halving",
                        h, w, nh, nw
                    ))
                }
            }
        }
        let k0 = kernel_for(h, w);
        let stem = [
            Conv::new(store, &format!("{}.stem1", name), c, features, k0, Init::He, rng),
            Conv::new(store, &format!("{}.stem2", name), features, features, k0, Init::He, rng),
        ];
        let downs = (1..=halvings)
            .map(|k| {
                let kk = kernel_for(h >> k, w >> k);
                Conv::new(store, &format!("{}.down{}", name, k), features, features, kk, Init::He, rng)
            })
            .collect();
        Ok(Self { stem, downs, features })
    }

    pub fn channels(&self) -> usize {
        self.features
    }

    /// Feature maps from finest to coarsest.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut h = self.stem[0].forward(p, x)?.relu()?;
        h = self.stem[1].forward(p, h)?.relu()?;
        let mut out = vec![h];
        for conv in &self.downs {
            h = conv.forward(p, h.max_pool2()?)?.relu()?;
            out.push(h);
        }
        Ok(out)
    }
}
