//! Brute-force Jacobian oracle for the analytic log-determinants.

use ndtensor::linalg::Lu;
use ndtensor::{Tape, Tensor};

use super::{Context, FlowLayer, Mode};
use crate::error::{config_err, FlowError, Result};
use crate::params::ParamStore;

/// Largest input dimension the oracle accepts.
pub const MAX_DIM: usize = 64;

/// Full Jacobian `∂f/∂y` by central differences, shape `[D_out, D_in]`.
pub fn jacobian(f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>, y: &Tensor<f64>, step: f64) -> Result<Tensor<f64>> {
    let d_in = y.numel();
    let mut probe = y.clone();
    let mut columns = Vec::with_capacity(d_in);
    for j in 0..d_in {
        let y0 = y.data()[j];
        probe.data_mut()[j] = y0 + step;
        let plus = f(&probe)?;
        probe.data_mut()[j] = y0 - step;
        let minus = f(&probe)?;
        probe.data_mut()[j] = y0;
        columns.push(plus.zip_map(&minus, |a, b| (a - b) / (2.0 * step))?);
    }
    let d_out = columns.first().map_or(0, |c| c.numel());
    Ok(Tensor::from_fn([d_out, d_in], |i| columns[i % d_in].data()[i / d_in]))
}

/// `log|det ∂f/∂y|` from the numerical Jacobian. A singular or non-square
/// Jacobian comes back as an error value rather than a panic.
pub fn numerical_logdet(f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>, y: &Tensor<f64>, step: f64) -> Result<f64> {
    if y.numel() > MAX_DIM {
        return config_err(format!("numerical log-det limited to dimension {}, got {}", MAX_DIM, y.numel()));
    }
    let j = jacobian(f, y, step)?;
    if j.shape()[0] != j.shape()[1] {
        return config_err(format!("Jacobian is {:?}, not square", j.shape()));
    }
    let lu = Lu::new(&j)?;
    if lu.det() == 0.0 {
        return Err(FlowError::Singular {
            layer: "numerical_logdet".into(),
            detail: "Jacobian is singular".into(),
        });
    }
    Ok(lu.log_abs_det())
}

fn run_layer(
    layer: &dyn FlowLayer<f64>,
    store: &ParamStore<f64>,
    y: &Tensor<f64>,
    features: &[Tensor<f64>],
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let feats = features.iter().map(|f| tape.constant(f.clone())).collect();
    let ctx = Context::new(None, feats, Mode::Eval);
    let (z, ld) = layer.forward(&p, tape.constant(y.clone()), &ctx)?;
    let z = (*z.value()).clone();
    let ld = (*ld.value()).clone();
    Ok((z, ld))
}

/// Analytic log-determinant of `layer` at the single item `y` (`[1, C, H, W]`).
pub fn layer_logdet(layer: &dyn FlowLayer<f64>, store: &ParamStore<f64>, y: &Tensor<f64>, features: &[Tensor<f64>]) -> Result<f64> {
    let (_, ld) = run_layer(layer, store, y, features)?;
    Ok(ld.data()[0])
}

/// Numerical counterpart of [`layer_logdet`].
pub fn layer_numerical_logdet(
    layer: &dyn FlowLayer<f64>,
    store: &ParamStore<f64>,
    y: &Tensor<f64>,
    features: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    if y.shape().first() != Some(&1) {
        return config_err("numerical log-det works on a single item");
    }
    numerical_logdet(|v| Ok(run_layer(layer, store, v, features)?.0), y, step)
}
