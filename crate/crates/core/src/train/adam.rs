use ndtensor::{Scalar, Tensor};

use crate::error::{FlowError, Result};
use crate::params::ParamStore;

/// Bias-corrected Adam over the trainable entries of a [`ParamStore`].
/// Moments are kept in `f64` whatever the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new<T: Scalar>(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `grads[i]` belongs to the `i`-th parameter of `store`;
    /// `None` (buffers, unused parameters) leaves it untouched. A non-finite
    /// gradient aborts before anything is modified, naming the parameter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(FlowError::Config(format!(
                "optimizer state for {} parameters, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(FlowError::Config(format!("gradient shape {:?} for {}", g.shape(), p.name)));
                }
                if !g.is_finite() {
                    return Err(FlowError::NonFinite {
                        layer: layer_of(&p.name).to_string(),
                        detail: format!("gradient of {}", p.name),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (Some(g), true) = (&grads[k], store.params()[k].trainable) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut value = store.get(id).clone();
            for (i, x) in value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *x = T::of(x.as_f64() - update);
            }
            store.set(id, value)?;
        }
        Ok(())
    }
}

/// Layer part of a parameter name (`level0.step1.coupling.net.conv1.weight`
/// → `level0.step1.coupling`).
pub fn layer_of(param: &str) -> &str {
    for marker in [".net.", ".conv", ".scale", ".bias", ".weight", ".running_"] {
        if let Some(i) = param.find(marker) {
            return &param[..i];
        }
    }
    param
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}
