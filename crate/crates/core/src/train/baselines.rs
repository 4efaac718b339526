//! Factored baselines `p(y | x) = ∏_d p(y_d | x)`: a small convolutional
//! network maps `x` to per-pixel distribution parameters at the target
//! resolution.

use ndtensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::flow::gaussian_log_prob;
use crate::nn::{kernel_for, Conv, Init};
use crate::params::{Bound, ParamStore};
use crate::rng::{randn, rng_from, FlowRng};

/// Probability floor for discretized-logistic bins and Bernoulli outputs.
pub const LOGISTIC_FLOOR: f64 = 1e-12;
pub const BERNOULLI_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Diagonal Gaussian on continuous targets.
    Gaussian,
    /// Discretized logistic on integers in `[0, levels)`.
    Logistic { levels: usize },
    /// Class-weighted Bernoulli on binary targets.
    Bernoulli { beta: f64 },
}

impl BaselineKind {
    fn outputs_per_dim(&self) -> usize {
        match self {
            BaselineKind::Gaussian | BaselineKind::Logistic { .. } => 2,
            BaselineKind::Bernoulli { .. } => 1,
        }
    }
}

/// `log P(y)` per item under per-pixel discretized logistics with bins
/// `[y − ½, y + ½]`; the outermost bins extend to `±∞`. Probabilities below
/// [`LOGISTIC_FLOOR`] are floored; the second value counts floored pixels.
pub fn factored_logistic_logprob<'t, T: Scalar>(
    y: &Tensor<T>,
    mu: Var<'t, T>,
    log_s: Var<'t, T>,
    levels: usize,
) -> Result<(Var<'t, T>, usize)> {
    let tape = mu.tape();
    let top = (levels - 1) as f64;
    if y.data().iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= top && v.as_f64().fract() == 0.0)) {
        return Err(crate::FlowError::Domain(format!("logistic targets must be integers in [0, {}]", top)));
    }
    let yv = tape.constant(y.clone());
    let inv_s = log_s.neg()?.exp()?;
    let centred = yv.sub(&mu)?;
    let a_plus = centred.add_scalar(T::of(0.5))?.mul(&inv_s)?;
    let a_minus = centred.add_scalar(T::of(-0.5))?.mul(&inv_s)?;
    // σ(b) − σ(a) = σ(b)·σ(−a)·(1 − e^{a−b}), and b − a = 1/s here.
    let width = inv_s.neg()?.exp()?.neg()?.add_scalar(T::one())?.clamp_min(T::of(LOGISTIC_FLOOR))?.log()?;
    let upper = a_plus.log_sigmoid()?;
    let lower = a_minus.neg()?.log_sigmoid()?;
    let interior = upper.add(&lower)?.add(&width)?;
    let mask = |f: &dyn Fn(f64) -> bool| tape.constant(y.map(|v| if f(v.as_f64()) { T::one() } else { T::zero() }));
    let lo = mask(&|v| v == 0.0 && top > 0.0);
    let hi = mask(&|v| v == top && top > 0.0);
    let mid = mask(&|v| v > 0.0 && v < top);
    let lp = mid.mul(&interior)?.add(&lo.mul(&upper)?)?.add(&hi.mul(&lower)?)?;
    let floor = T::of(LOGISTIC_FLOOR.ln());
    let floored = lp.value().data().iter().filter(|v| **v < floor).count();
    Ok((lp.clamp_min(floor)?.sum_per_item()?, floored))
}

/// Per-pixel argmax of the discretized-logistic PMF.
pub fn logistic_mode(mu: &Tensor<f64>, log_s: &Tensor<f64>, levels: usize) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let best = (0..levels)
        .map(|k| {
            let y = Tensor::full(mu.shape().to_vec(), k as f64);
            let per_pixel = pixel_logistic(&tape, &y, mu, log_s, levels)?;
            Ok((k, per_pixel))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_fn(mu.shape().to_vec(), |i| {
        best.iter()
            .fold((0usize, f64::NEG_INFINITY), |acc, (k, lp)| if lp[i] > acc.1 { (*k, lp[i]) } else { acc })
            .0 as f64
    }))
}

fn pixel_logistic(tape: &Tape<f64>, y: &Tensor<f64>, mu: &Tensor<f64>, log_s: &Tensor<f64>, levels: usize) -> Result<Vec<f64>> {
    let n = mu.numel();
    let flat = |t: &Tensor<f64>| t.reshape([n, 1]);
    let (lp, _) = factored_logistic_logprob(
        &flat(y)?,
        tape.constant(flat(mu)?),
        tape.constant(flat(log_s)?),
        levels,
    )?;
    Ok(lp.value().data().to_vec())
}

/// Weighted-Bernoulli log-likelihood per item: the log numerator
/// `β y log p + (1 − β)(1 − y) log(1 − p)` and its normalised version
/// (numerator minus `log(p^β + (1 − p)^{1−β})`). `p` is clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn weighted_bernoulli_logprob<'t, T: Scalar>(
    y: &Tensor<T>,
    logits: Var<'t, T>,
    beta: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if y.data().iter().any(|v| *v != T::zero() && *v != T::one()) {
        return Err(crate::FlowError::Domain("weighted Bernoulli targets must be binary".into()));
    }
    let tape = logits.tape();
    let floor = T::of(BERNOULLI_CLAMP.ln());
    let log_p = logits.log_sigmoid()?.clamp_min(floor)?;
    let log_1mp = logits.neg()?.log_sigmoid()?.clamp_min(floor)?;
    let yv = tape.constant(y.clone());
    let not_y = tape.constant(y.map(|v| T::one() - v));
    let num = yv.mul(&log_p)?.mul_scalar(T::of(beta))?.add(&not_y.mul(&log_1mp)?.mul_scalar(T::of(1.0 - beta))?)?;
    let norm = log_p.mul_scalar(T::of(beta))?.exp()?.add(&log_1mp.mul_scalar(T::of(1.0 - beta))?.exp()?)?.log()?;
    Ok((num.sum_per_item()?, num.sub(&norm)?.sum_per_item()?))
}

/// Convolutional net `x → distribution parameters` with `2^up` fold
/// upsampling by depth-to-space at the end.
pub struct FactoredBaseline<T: Scalar> {
    pub kind: BaselineKind,
    pub params: ParamStore<T>,
    pub hidden: usize,
    convs: Vec<Conv>,
    up: usize,
    shape: [usize; 3],
}

/// Output parameters of the baseline for one batch.
pub struct BaselineOutput<'t, T: Scalar> {
    /// Mean (Gaussian, logistic) or logit (Bernoulli).
    pub loc: Var<'t, T>,
    /// Log standard deviation / log logistic scale; `None` for Bernoulli.
    pub log_scale: Option<Var<'t, T>>,
}

impl<T: Scalar> FactoredBaseline<T> {
    /// `shape` is the target `[C, H, W]`, `x_shape` the conditioning input;
    /// the target resolution must be the input's times a power of two.
    pub fn new(kind: BaselineKind, shape: [usize; 3], x_shape: [usize; 3], hidden: usize, rng: &mut FlowRng) -> Result<Self> {
        let (fy, fx) = (shape[1] / x_shape[1].max(1), shape[2] / x_shape[2].max(1));
        if fy != fx || !fy.is_power_of_two() || x_shape[1] * fy != shape[1] || x_shape[2] * fx != shape[2] {
            return config_err(format!(
                "baseline needs a power-of-two upscaling from {:?} to {:?}",
                x_shape, shape
            ));
        }
        if hidden == 0 {
            return config_err("baseline width must be positive");
        }
        let up = fy.trailing_zeros() as usize;
        let out = shape[0] * kind.outputs_per_dim() * 4usize.pow(up as u32);
        let k = kernel_for(x_shape[1], x_shape[2]);
        let mut params = ParamStore::new();
        let convs = vec![
            Conv::new(&mut params, "baseline.conv1", x_shape[0], hidden, k, Init::He, rng),
            Conv::new(&mut params, "baseline.conv2", hidden, hidden, k, Init::He, rng),
            Conv::new(&mut params, "baseline.conv3", hidden, out, k, Init::Zeros, rng),
        ];
        Ok(Self {
            kind,
            params,
            hidden,
            convs,
            up,
            shape,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<BaselineOutput<'t, T>> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(p, h)?;
            if i + 1 < self.convs.len() {
                h = h.relu()?;
            }
        }
        for _ in 0..self.up {
            h = h.depth_to_space()?;
        }
        let c = self.shape[0];
        Ok(match self.kind {
            BaselineKind::Bernoulli { .. } => BaselineOutput {
                loc: h,
                log_scale: None,
            },
            BaselineKind::Gaussian => BaselineOutput {
                loc: h.narrow(1, 0, c)?,
                log_scale: Some(h.narrow(1, c, c)?),
            },
            BaselineKind::Logistic { levels } => {
                // Parameters in pixel units around mid-range with a scale
                // of about one sixteenth of the range.
                let l = levels as f64;
                BaselineOutput {
                    loc: h.narrow(1, 0, c)?.add_scalar(T::of(0.5))?.mul_scalar(T::of(l - 1.0))?,
                    log_scale: Some(h.narrow(1, c, c)?.add_scalar(T::of((l / 16.0).max(0.25).ln()))?),
                }
            }
        })
    }

    /// `(training objective, reported log-likelihood)` per item. They differ
    /// only for the Bernoulli baseline, which trains on the numerator.
    pub fn log_likelihood<'t>(&self, p: &Bound<'t, T>, y: &Tensor<T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = self.forward(p, x)?;
        match self.kind {
            BaselineKind::Gaussian => {
                let yv = x.tape().constant(y.clone());
                let lp = gaussian_log_prob(yv, out.loc, out.log_scale.expect("gaussian has a scale"))?;
                Ok((lp, lp))
            }
            BaselineKind::Logistic { levels } => {
                let (lp, _) = factored_logistic_logprob(y, out.loc, out.log_scale.expect("logistic has a scale"), levels)?;
                Ok((lp, lp))
            }
            BaselineKind::Bernoulli { beta } => weighted_bernoulli_logprob(y, out.loc, beta),
        }
    }

    /// Reported log-likelihood per item, evaluation mode.
    pub fn log_prob(&self, y: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (_, lp) = self.log_likelihood(&p, y, tape.constant(x.clone()))?;
        let out = (*lp.value()).clone();
        Ok(out)
    }

    /// Per-pixel parameters `(loc, log_scale)` as values.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(x.clone()))?;
        let loc = (*out.loc.value()).clone();
        Ok((loc, out.log_scale.map(|s| (*s.value()).clone())))
    }

    /// Independent per-pixel samples at temperature `tau` (Gaussian,
    /// logistic) or Bernoulli draws with `p = σ(logit)`.
    pub fn sample(&self, x: &Tensor<T>, tau: f64, rng: &mut impl Rng) -> Result<Tensor<f64>> {
        let (loc, log_scale) = self.predict(x)?;
        let loc = loc.cast::<f64>();
        let scale = log_scale.map(|s| s.cast::<f64>().map(f64::exp));
        let values: Vec<f64> = match self.kind {
            BaselineKind::Bernoulli { .. } => loc
                .data()
                .iter()
                .map(|l| (rng.random::<f64>() < 1.0 / (1.0 + (-l).exp())) as u8 as f64)
                .collect(),
            BaselineKind::Gaussian => {
                let s = scale.expect("gaussian has a scale");
                let eps = randn::<f64>(rng, loc.shape());
                (0..loc.numel()).map(|i| loc.data()[i] + tau * s.data()[i] * eps.data()[i]).collect()
            }
            BaselineKind::Logistic { levels } => {
                let s = scale.expect("logistic has a scale");
                (0..loc.numel())
                    .map(|i| {
                        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                        let v = loc.data()[i] + tau * s.data()[i] * (u / (1.0 - u)).ln();
                        v.round().clamp(0.0, (levels - 1) as f64)
                    })
                    .collect()
            }
        };
        Ok(Tensor::new(loc.shape().to_vec(), values)?)
    }
}

/// Width whose parameter count is closest to `target`; also returns the
/// relative mismatch.
pub fn matched_width(
    kind: BaselineKind,
    shape: [usize; 3],
    x_shape: [usize; 3],
    target: usize,
) -> Result<(usize, f64)> {
    let mut rng = rng_from(0);
    let mut best = (1, f64::INFINITY);
    for hidden in 1..=512 {
        let n = FactoredBaseline::<f32>::new(kind, shape, x_shape, hidden, &mut rng)?.num_params();
        let rel = (n as f64 - target as f64).abs() / target as f64;
        if rel < best.1 {
            best = (hidden, rel);
        }
        if n > 2 * target {
            break;
        }
    }
    Ok(best)
}
