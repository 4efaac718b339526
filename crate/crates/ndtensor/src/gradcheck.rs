//! Central finite differences against tape gradients, in `f64`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with the denominator `max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
    /// Set when `f` errored or returned a non-finite value anywhere.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }

    fn failed(msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            worst: None,
            analytic_at_worst: f64::NAN,
            numeric_at_worst: f64::NAN,
            coordinates_checked: 0,
            failure: Some(msg),
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, String>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars).map_err(|e| e.to_string())?;
    let v = out.value();
    match v.item() {
        Some(x) if x.is_finite() => Ok(x),
        Some(x) => Err(format!("f returned {}", x)),
        None => Err(format!("f returned shape {:?}, expected a scalar", v.shape())),
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of width `2·step` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = match f(&tape, &vars) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    if !out.value().is_finite() {
        return GradCheckReport::failed("f returned a non-finite value".into());
    }
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
        failure: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape().to_vec()));
        for coord in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = x0 + step;
            let plus = evaluate(&f, &probe);
            probe[which].data_mut()[coord] = x0 - step;
            let minus = evaluate(&f, &probe);
            probe[which].data_mut()[coord] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(format!("input {} coord {}: {}", which, coord, e));
                    report.max_rel_err = f64::INFINITY;
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[coord];
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((which, coord));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
