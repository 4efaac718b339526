//! Self-verification suites.
//!
//! Each oracle compares an analytic quantity with an independent numerical
//! one (round trips, finite-difference Jacobians and gradients, quadrature
//! of the learned density, exhaustive sums) and reports the measured error
//! against a fixed tolerance. The `check` command and the acceptance suite
//! both run these.

use std::fmt;

use ndtensor::gradcheck::{grad_check, relative_error};
use ndtensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::dequant::{requantize_binary, requantize_integer, uniform_dequantize, BinaryDequantConfig, BinaryDequantizer, Dequantizer};
use crate::error::Result;
use crate::flow::oracle::numerical_logdet;
use crate::flow::{
    perturb_params, ActNorm, ActivationNorm, AffineCoupling, CondShape, Context, ContextAffine, FlowLayer,
    InstanceNormFlow, InvConv1x1, Mode, Squeeze, Variant,
};
use crate::metrics::{metric_axiom_check, pr_curve, psnr, ssim, thresholds, FlowMetric, Pooling, AXIOM_TOL};
use crate::params::{Bound, ParamStore};
use crate::rng::{indexed_seed, randn, rng_from, FlowRng};
use crate::train::{factored_logistic_logprob, split_validation, train, weighted_bernoulli_logprob, CnfObjective, TrainConfig};
use crate::{FlowModel, ModelConfig};

pub const INVERTIBILITY_TOL_F32: f64 = 1e-4;
pub const INVERTIBILITY_TOL_F64: f64 = 1e-9;
pub const LOGDET_TOL: f64 = 1e-5;
pub const LOGDET_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const NORMALIZATION_TOL: f64 = 5e-3;
pub const ELBO_SLACK: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl OracleResult {
    /// Passes when `measured < tolerance`.
    fn below(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured < tolerance,
            detail,
        }
    }

    fn error(name: &str, tolerance: f64, e: impl fmt::Display) -> Self {
        Self {
            name: name.to_string(),
            measured: f64::NAN,
            tolerance,
            passed: false,
            detail: format!("error: {}", e),
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<(f64, String)>) -> Self {
        match r {
            Ok((m, d)) => Self::below(name, m, tolerance, d),
            Err(e) => Self::error(name, tolerance, e),
        }
    }
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {:.3e} tolerance {:.1e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Layers,
    Gradients,
    Normalization,
    Dequant,
    Metrics,
    All,
}

/// Deliberate defects used to confirm the oracles can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Adds a term to the gradient-check objective that the tape does not
    /// differentiate.
    pub wrong_gradient: bool,
}

/// Sizes of each suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckSizes {
    pub invertibility_configs: usize,
    pub logdet_configs: usize,
    pub normalization_iterations: usize,
    pub normalization_grid: usize,
    pub elbo_configs: usize,
    pub support_draws: usize,
    pub axiom_triples: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        Self {
            invertibility_configs: 100,
            logdet_configs: 20,
            normalization_iterations: 1500,
            normalization_grid: 400,
            elbo_configs: 20,
            support_draws: 100_000,
            axiom_triples: 10_000,
        }
    }
}

pub fn run_scope(scope: Scope, sizes: &CheckSizes, seed: u64, faults: Faults) -> Vec<OracleResult> {
    let all = scope == Scope::All;
    let mut out = Vec::new();
    if all || scope == Scope::Layers {
        out.extend(invertibility(sizes.invertibility_configs, seed));
        out.extend(logdet_oracle(sizes.logdet_configs, seed));
    }
    if all || scope == Scope::Gradients {
        out.push(gradient_oracle(seed, faults));
    }
    if all || scope == Scope::Normalization {
        out.push(normalization_oracle(seed, sizes.normalization_iterations, sizes.normalization_grid));
    }
    if all || scope == Scope::Dequant {
        out.push(elbo_bound_oracle(sizes.elbo_configs, seed));
        out.push(support_oracle(sizes.support_draws, seed));
    }
    if all || scope == Scope::Metrics {
        out.extend(metric_golden_values());
        out.push(metric_axiom_oracle(sizes.axiom_triples, seed));
    }
    out
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ActNorm,
    InstanceNorm,
    InvConv,
    Squeeze,
    Coupling,
    VolumePreservingCoupling,
    ConditionalCoupling,
    ContextAffine,
}

pub const LAYER_KINDS: [LayerKind; 8] = [
    LayerKind::ActNorm,
    LayerKind::InstanceNorm,
    LayerKind::InvConv,
    LayerKind::Squeeze,
    LayerKind::Coupling,
    LayerKind::VolumePreservingCoupling,
    LayerKind::ConditionalCoupling,
    LayerKind::ContextAffine,
];

/// A randomly configured layer with non-trivial parameters, its input and
/// conditioning features.
pub struct LayerCase<T: Scalar> {
    pub layer: Box<dyn FlowLayer<T>>,
    pub store: ParamStore<T>,
    pub y: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

fn pick<T: Copy>(rng: &mut FlowRng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

/// Builds a layer of `kind` with an input of at most `max_dim` values per
/// item. The same seed gives the same case in either precision.
pub fn layer_case<T: Scalar>(kind: LayerKind, seed: u64, batch: usize, max_dim: usize) -> Result<LayerCase<T>> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::new();
    let (c, h, w) = loop {
        let c = pick(&mut rng, &[2usize, 4]);
        let h = pick(&mut rng, &[1usize, 2, 4]);
        let w = pick(&mut rng, &[1usize, 2, 4]);
        let ok = c * h * w <= max_dim && (kind != LayerKind::Squeeze || (h % 2 == 0 && w % 2 == 0));
        let ok = ok && (kind != LayerKind::InstanceNorm || h * w > 1);
        if ok {
            break (c, h, w);
        }
    };
    let cond_channels = 3;
    let hidden = pick(&mut rng, &[4usize, 8]);
    let layer: Box<dyn FlowLayer<T>> = match kind {
        LayerKind::ActNorm => Box::new(ActNorm::new(&mut store, "actnorm", c)),
        LayerKind::InstanceNorm => {
            let l = InstanceNormFlow::new(&mut store, "instnorm", c);
            let mean = randn::<T>(&mut rng, &[1, c, 1, 1]);
            let std = randn::<T>(&mut rng, &[1, c, 1, 1]).map(|v| (v * T::of(0.3)).exp());
            store.set(l.running_mean, mean)?;
            store.set(l.running_std, std)?;
            Box::new(l)
        }
        LayerKind::InvConv => Box::new(InvConv1x1::new(&mut store, "invconv", c, &mut rng)),
        LayerKind::Squeeze => Box::new(Squeeze::new("squeeze")),
        LayerKind::Coupling => Box::new(AffineCoupling::new(
            &mut store,
            "coupling",
            [c, h, w],
            0,
            hidden,
            rng.random_bool(0.5) && h * w > 1,
            Variant::Affine,
            &mut rng,
        )?),
        LayerKind::VolumePreservingCoupling => Box::new(AffineCoupling::new(
            &mut store,
            "vp_coupling",
            [c, h, w],
            0,
            hidden,
            false,
            Variant::VolumePreserving,
            &mut rng,
        )?),
        LayerKind::ConditionalCoupling => Box::new(AffineCoupling::new(
            &mut store,
            "cond_coupling",
            [c, h, w],
            cond_channels,
            hidden,
            false,
            Variant::Affine,
            &mut rng,
        )?),
        LayerKind::ContextAffine => Box::new(ContextAffine::new(&mut store, "context_affine", [c, h, w], cond_channels, hidden, &mut rng)?),
    };
    perturb_params(&mut store, 0.3, &mut rng);
    let y = randn(&mut rng, &[batch, c, h, w]);
    let features = match kind {
        LayerKind::ConditionalCoupling | LayerKind::ContextAffine => vec![randn(&mut rng, &[batch, cond_channels, h, w])],
        _ => Vec::new(),
    };
    Ok(LayerCase { layer, store, y, features })
}

/// Forward through `layers` in order: `(z, summed logdet)`.
pub fn run_stack<T: Scalar>(
    layers: &[&dyn FlowLayer<T>],
    store: &ParamStore<T>,
    y: &Tensor<T>,
    features: &[Tensor<T>],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ctx = Context::new(None, features.iter().map(|f| tape.constant(f.clone())).collect(), Mode::Eval);
    let mut h = tape.constant(y.clone());
    let mut acc = tape.constant(Tensor::zeros([y.shape()[0]]));
    for l in layers {
        let (z, ld) = l.forward(&p, h, &ctx)?;
        acc = acc.add(&ld)?;
        h = z;
    }
    let z = (*h.value()).clone();
    let ld = (*acc.value()).clone();
    Ok((z, ld))
}

fn stack_inverse<T: Scalar>(layers: &[&dyn FlowLayer<T>], store: &ParamStore<T>, z: &Tensor<T>, features: &[Tensor<T>]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ctx = Context::new(None, features.iter().map(|f| tape.constant(f.clone())).collect(), Mode::Eval);
    let mut h = tape.constant(z.clone());
    for l in layers.iter().rev() {
        h = l.inverse(&p, h, &ctx)?.0;
    }
    let out = (*h.value()).clone();
    Ok(out)
}

fn layer_round_trip<T: Scalar>(kind: LayerKind, seed: u64) -> Result<f64> {
    let case = layer_case::<T>(kind, seed, 3, 64)?;
    let layers = [case.layer.as_ref()];
    let (z, _) = run_stack(&layers, &case.store, &case.y, &case.features)?;
    let back = stack_inverse(&layers, &case.store, &z, &case.features)?;
    Ok(back.max_abs_diff(&case.y).expect("same shape"))
}

/// Random two-level, two-step model over 8×8 images.
pub fn random_model_config(seed: u64) -> ModelConfig {
    let mut rng = rng_from(seed);
    let channels = pick(&mut rng, &[1usize, 2]);
    let cond = rng.random_bool(0.5).then(|| CondShape {
        channels: 1,
        height: pick(&mut rng, &[4usize, 8]),
        width: 0,
    });
    let cond = cond.map(|c| CondShape { width: c.height, ..c });
    ModelConfig {
        channels,
        height: 8,
        width: 8,
        cond,
        levels: 2,
        steps_per_level: 2,
        squeeze: true,
        split: rng.random_bool(0.5),
        hidden_channels: pick(&mut rng, &[4usize, 8]),
        cond_features: 4,
        variant: pick(&mut rng, &[Variant::Affine, Variant::VolumePreserving]),
        activation_norm: pick(&mut rng, &[ActivationNorm::ActNorm, ActivationNorm::InstanceNorm, ActivationNorm::None]),
        coupling_instance_norm: rng.random_bool(0.3),
    }
}

/// Weight noise added to freshly built models. Larger values let shifts
/// compound through unnormalised steps until latents reach the hundreds,
/// where `f32` spacing alone exceeds the round-trip tolerance.
pub const MODEL_PERTURBATION: f64 = 0.02;

fn model_round_trip<T: Scalar>(seed: u64) -> Result<f64> {
    let cfg = random_model_config(seed);
    let mut rng = rng_from(indexed_seed(seed, 1));
    let mut model = FlowModel::<T>::new(cfg.clone(), &mut rng)?;
    perturb_params(&mut model.params, MODEL_PERTURBATION, &mut rng);
    let y = randn::<T>(&mut rng, &[2, cfg.channels, cfg.height, cfg.width]);
    let x = cfg.cond.map(|c| randn::<T>(&mut rng, &[2, c.channels, c.height, c.width]));
    let (latents, _, _) = model.encode(&y, x.as_ref())?;
    let back = model.decode(&latents, x.as_ref())?;
    Ok(back.max_abs_diff(&y).expect("same shape"))
}

/// `(worst error, what produced it)` over `n` configurations; every
/// `LAYER_KINDS.len() + 1`-th configuration is a full model.
fn worst_round_trip<T: Scalar>(n: usize, seed: u64) -> Result<(f64, String)> {
    let mut worst = (0.0f64, String::from("none"));
    let kinds = LAYER_KINDS.len() + 1;
    for i in 0..n {
        let s = indexed_seed(seed, i as u64);
        let (err, what) = match LAYER_KINDS.get(i % kinds) {
            Some(&kind) => (layer_round_trip::<T>(kind, s)?, format!("{:?}", kind)),
            None => (model_round_trip::<T>(s)?, "model".to_string()),
        };
        if !(err <= worst.0) {
            worst = (err, format!("worst: {} config {}", what, i));
        }
    }
    Ok((worst.0, format!("{} configs, {}", n, worst.1)))
}

/// Round-trip error of every layer type and the assembled model.
pub fn invertibility(n_configs: usize, seed: u64) -> Vec<OracleResult> {
    vec![
        OracleResult::from_result("invertibility_f32", INVERTIBILITY_TOL_F32, worst_round_trip::<f32>(n_configs, seed)),
        OracleResult::from_result("invertibility_f64", INVERTIBILITY_TOL_F64, worst_round_trip::<f64>(n_configs, seed)),
    ]
}

/// Analytic vs numerical log-determinant for one case: relative error.
fn logdet_case(kind: &str, seed: u64) -> Result<f64> {
    let (layers, store, y, features): (Vec<Box<dyn FlowLayer<f64>>>, _, _, _) = match kind {
        "coupling" => {
            let k = if seed % 2 == 0 { LayerKind::ConditionalCoupling } else { LayerKind::Coupling };
            let c = layer_case::<f64>(k, seed, 1, 16)?;
            (vec![c.layer], c.store, c.y, c.features)
        }
        "invconv" => {
            let c = layer_case::<f64>(LayerKind::InvConv, seed, 1, 16)?;
            (vec![c.layer], c.store, c.y, c.features)
        }
        "actnorm" => {
            let c = layer_case::<f64>(LayerKind::ActNorm, seed, 1, 16)?;
            (vec![c.layer], c.store, c.y, c.features)
        }
        _ => {
            // actnorm -> 1x1 conv -> conditional coupling on a shared store.
            let mut rng = rng_from(seed);
            let mut store = ParamStore::new();
            let c = pick(&mut rng, &[2usize, 4]);
            let (h, w) = pick(&mut rng, &[(1usize, 1usize), (1, 2), (2, 1), (2, 2)]);
            let layers: Vec<Box<dyn FlowLayer<f64>>> = vec![
                Box::new(ActNorm::new(&mut store, "actnorm", c)),
                Box::new(InvConv1x1::new(&mut store, "invconv", c, &mut rng)),
                Box::new(AffineCoupling::new(&mut store, "coupling", [c, h, w], 2, 4, false, Variant::Affine, &mut rng)?),
            ];
            perturb_params(&mut store, 0.3, &mut rng);
            let y = randn(&mut rng, &[1, c, h, w]);
            let f = randn(&mut rng, &[1, 2, h, w]);
            (layers, store, y, vec![f])
        }
    };
    let refs: Vec<&dyn FlowLayer<f64>> = layers.iter().map(|l| l.as_ref()).collect();
    let analytic = run_stack(&refs, &store, &y, &features)?.1.data()[0];
    let numeric = numerical_logdet(|v| Ok(run_stack(&refs, &store, v, &features)?.0), &y, LOGDET_STEP)?;
    Ok(relative_error(analytic, numeric))
}

pub const LOGDET_KINDS: [&str; 4] = ["coupling", "invconv", "actnorm", "composite"];

/// Log-determinant oracle for each of [`LOGDET_KINDS`], `n` configurations
/// each, input dimension at most 16.
pub fn logdet_oracle(n: usize, seed: u64) -> Vec<OracleResult> {
    LOGDET_KINDS
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let r = (0..n).try_fold((0.0f64, 0usize), |(worst, at), i| {
                let e = logdet_case(kind, indexed_seed(seed ^ (k as u64 + 1) << 32, i as u64))?;
                Ok::<_, crate::FlowError>(if e > worst { (e, i) } else { (worst, at) })
            });
            OracleResult::from_result(
                &format!("logdet_{}", kind),
                LOGDET_TOL,
                r.map(|(w, at)| (w, format!("{} configs, worst config {}", n, at))),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradients

/// Tiny conditional model exercising every parameterised layer type.
pub fn gradient_model(seed: u64) -> Result<(FlowModel<f64>, Tensor<f64>, Tensor<f64>)> {
    let cfg = ModelConfig {
        channels: 1,
        height: 4,
        width: 4,
        cond: Some(CondShape {
            channels: 1,
            height: 2,
            width: 2,
        }),
        levels: 2,
        steps_per_level: 1,
        squeeze: true,
        split: true,
        hidden_channels: 3,
        cond_features: 2,
        variant: Variant::Affine,
        activation_norm: ActivationNorm::ActNorm,
        coupling_instance_norm: false,
    };
    let mut rng = rng_from(seed);
    let mut model = FlowModel::new(cfg, &mut rng)?;
    perturb_params(&mut model.params, 0.1, &mut rng);
    let y = randn(&mut rng, &[1, 1, 4, 4]);
    let x = randn(&mut rng, &[1, 1, 2, 2]);
    Ok((model, y, x))
}

fn gradient_objective<'t>(
    model: &FlowModel<f64>,
    y: &Tensor<f64>,
    x: &Tensor<f64>,
    wrong_gradient: bool,
    tape: &'t Tape<f64>,
    vars: &[Var<'t, f64>],
) -> ndtensor::Result<Var<'t, f64>> {
    let p = Bound::from_vars(vars.to_vec());
    let lp = (|| -> Result<Var<'t, f64>> {
        let ctx = model.context(&p, Some(tape.constant(x.clone())), Mode::Eval)?;
        Ok(model.encode_with(&p, tape.constant(y.clone()), &ctx)?.log_prob()?.sum()?)
    })()
    .map_err(|e| ndtensor::TensorError::Domain(e.to_string()))?;
    if wrong_gradient {
        // Enters the value but not the tape.
        let hidden = tape.constant((*vars[0].value()).clone()).sum()?;
        return lp.add(&hidden);
    }
    Ok(lp)
}

/// Tape gradients of the summed log-likelihood with respect to every
/// parameter against central differences.
pub fn gradient_oracle(seed: u64, faults: Faults) -> OracleResult {
    let (model, y, x) = match gradient_model(seed) {
        Ok(m) => m,
        Err(e) => return OracleResult::error("grad_check", GRADIENT_TOL, e),
    };
    let inputs: Vec<Tensor<f64>> = model.params.params().iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        |tape, vars| gradient_objective(&model, &y, &x, faults.wrong_gradient, tape, vars),
        &inputs,
        GRADIENT_STEP,
    );
    let detail = match (&report.failure, report.worst) {
        (Some(msg), _) => msg.clone(),
        (None, Some((i, c))) => format!(
            "{} coordinates, worst {}[{}] analytic {:.6e} numeric {:.6e}",
            report.coordinates_checked,
            model.params.params()[i].name,
            c,
            report.analytic_at_worst,
            report.numeric_at_worst
        ),
        (None, None) => "no coordinates".into(),
    };
    OracleResult {
        name: "grad_check".into(),
        measured: report.max_rel_err,
        tolerance: GRADIENT_TOL,
        passed: report.passed(GRADIENT_TOL),
        detail,
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Trains a small unconditional flow on the 2-D toy data.
pub fn train_2d_flow(seed: u64, iterations: usize) -> Result<FlowModel<f64>> {
    let spec = DataSpec::TwoD { conditional: false };
    let (tr, val) = split_validation(spec.generate(indexed_seed(seed, 0), 0..2000));
    let cfg = ModelConfig {
        channels: 2,
        height: 1,
        width: 1,
        cond: None,
        levels: 1,
        steps_per_level: 4,
        squeeze: false,
        split: false,
        hidden_channels: 32,
        cond_features: 16,
        variant: Variant::Affine,
        activation_norm: ActivationNorm::ActNorm,
        coupling_instance_norm: false,
    };
    let model = FlowModel::new(cfg.clone(), &mut rng_from(indexed_seed(seed, 1)))?;
    let mut obj = CnfObjective {
        model,
        dequantizer: Dequantizer::Identity,
    };
    let tc = TrainConfig {
        iterations,
        batch_size: 64,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    train(&mut obj, &tr, &val, false, &tc, indexed_seed(seed, 2), |_| {}).map_err(|a| a.error)?;
    Ok(obj.model)
}

/// `∫ p` over `[-half_width, half_width]²` by the trapezoid rule on an
/// `n × n` grid of intervals.
pub fn integrate_density_2d(model: &FlowModel<f64>, half_width: f64, n: usize) -> Result<f64> {
    let h = 2.0 * half_width / n as f64;
    let coord = |i: usize| -half_width + h * i as f64;
    let weight = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let points: Vec<(usize, usize)> = (0..=n).flat_map(|i| (0..=n).map(move |j| (i, j))).collect();
    let mut total = 0.0;
    for chunk in points.chunks(4096) {
        let mut data = Vec::with_capacity(2 * chunk.len());
        for &(i, j) in chunk {
            data.push(coord(i));
            data.push(coord(j));
        }
        let y = Tensor::new([chunk.len(), 2, 1, 1], data)?;
        let lp = model.log_prob(&y, None)?;
        for (&(i, j), l) in chunk.iter().zip(lp.data()) {
            total += weight(i) * weight(j) * l.exp();
        }
    }
    Ok(total * h * h)
}

pub fn normalization_oracle(seed: u64, iterations: usize, grid: usize) -> OracleResult {
    let r = train_2d_flow(seed, iterations)
        .and_then(|m| integrate_density_2d(&m, 8.0, grid))
        .map(|mass| ((mass - 1.0).abs(), format!("mass {:.6} on a {}x{} grid over [-8,8]^2", mass, grid, grid)));
    OracleResult::from_result("normalization", NORMALIZATION_TOL, r)
}

// ---------------------------------------------------------------------------
// Dequantization

/// `∫ f` by the trapezoid rule on `n` intervals of `[a, b]`.
fn trapezoid(f: impl Fn(&[f64]) -> Result<Vec<f64>>, a: f64, b: f64, n: usize) -> Result<f64> {
    let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let ys = f(&xs)?;
    Ok((b - a) / n as f64 * (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[n])))
}

fn column(v: &[f64]) -> Result<Tensor<f64>> {
    Ok(Tensor::new([v.len(), 1, 1, 1], v.to_vec())?)
}

/// Scalar conditional flow and binary dequantizer with perturbed weights.
pub fn scalar_pair(seed: u64) -> Result<(FlowModel<f64>, BinaryDequantizer<f64>)> {
    let cond = Some(CondShape {
        channels: 1,
        height: 1,
        width: 1,
    });
    let cfg = ModelConfig {
        channels: 1,
        height: 1,
        width: 1,
        cond,
        levels: 1,
        steps_per_level: 0,
        squeeze: false,
        split: false,
        cond_features: 4,
        ..ModelConfig::default()
    };
    let mut rng = rng_from(seed);
    let mut model = FlowModel::new(cfg, &mut rng)?;
    perturb_params(&mut model.params, 0.5, &mut rng);
    let mut dq = BinaryDequantizer::new(BinaryDequantConfig::default(), [1, 1, 1], cond, &mut rng)?;
    perturb_params(&mut dq.params, 0.05, &mut rng);
    Ok((model, dq))
}

/// `E_q[log p(v|x) - log q(v|y,x)] - log P(y|x)` by quadrature for one
/// configuration; non-positive up to quadrature error.
pub fn elbo_excess(seed: u64, label: bool) -> Result<f64> {
    let (model, dq) = scalar_pair(seed)?;
    let xv = rng_from(indexed_seed(seed, 7)).random_range(-1.5..1.5);
    let (a, b) = if label { (0.5, 8.5) } else { (-7.5, 0.5) };
    let xs = |k: usize| column(&vec![xv; k]);
    let log_p = |vs: &[f64]| -> Result<Vec<f64>> {
        let w: Vec<f64> = vs.iter().map(|v| v - 0.5).collect();
        Ok(model.log_prob(&column(&w)?, Some(&xs(vs.len())?))?.data().to_vec())
    };
    let n = 40_000;
    let exact = trapezoid(|vs| Ok(log_p(vs)?.iter().map(|l| l.exp()).collect()), a, b, n)?.ln();
    let expected = trapezoid(
        |vs| {
            let lq = dq.log_q(&column(vs)?, Some(&xs(vs.len())?))?;
            Ok(lq.data().iter().zip(log_p(vs)?).map(|(q, p)| q.exp() * (p - q)).collect())
        },
        a,
        b,
        n,
    )?;
    Ok(expected - exact)
}

/// Expected ELBO never exceeds the exact log-likelihood, over `n`
/// (configuration, label) pairs. Measured value is the largest excess.
pub fn elbo_bound_oracle(n: usize, seed: u64) -> OracleResult {
    let r = (0..n).try_fold((f64::NEG_INFINITY, 0usize), |(worst, at), i| {
        let e = elbo_excess(indexed_seed(seed ^ 0xE1B0, (i / 2) as u64), i % 2 == 0)?;
        Ok::<_, crate::FlowError>(if e > worst { (e, i) } else { (worst, at) })
    });
    let r = r.map(|(w, at)| (w, format!("{} configs, largest ELBO - log P = {:.3e} at config {}", n, w, at)));
    OracleResult::from_result("elbo_bound", ELBO_SLACK, r)
}

/// Every dequantized draw requantizes to its label: `draws` binary lifts of
/// random masks and `draws` uniform lifts of random integers. Measured value
/// is the violation count.
pub fn support_oracle(draws: usize, seed: u64) -> OracleResult {
    let r = (|| -> Result<(f64, String)> {
        let mut rng = rng_from(indexed_seed(seed, 0x5u64));
        let side = 8;
        let per = side * side;
        let items = draws.div_ceil(per);
        let cond = Some(CondShape {
            channels: 1,
            height: side,
            width: side,
        });
        let mut dq = BinaryDequantizer::<f64>::new(BinaryDequantConfig::default(), [1, side, side], cond, &mut rng)?;
        perturb_params(&mut dq.params, 0.3, &mut rng);
        let y = Tensor::from_fn([items, 1, side, side], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let x = randn(&mut rng, &[items, 1, side, side]);
        let s = dq.dequantize(&y, Some(&x), &mut rng)?;
        let back = requantize_binary(&s.v);
        let binary_bad = back.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();

        let levels = 32;
        let yi = Tensor::from_fn([items * per], |_| rng.random_range(0..levels) as f64);
        let u = uniform_dequantize(&yi, levels, &mut rng)?;
        let uniform_bad = requantize_integer(&u.v).data().iter().zip(yi.data()).filter(|(a, b)| a != b).count();
        let bad = binary_bad + uniform_bad;
        Ok((
            bad as f64,
            format!(
                "{} binary and {} uniform draws, {} violations",
                items * per,
                items * per,
                bad
            ),
        ))
    })();
    // Zero violations allowed: measured must be below 0.5.
    OracleResult::from_result("support", 0.5, r)
}

// ---------------------------------------------------------------------------
// Metrics

/// Closed-form checks of the evaluation metrics and baseline likelihoods.
pub fn metric_golden_values() -> Vec<OracleResult> {
    let mut out = Vec::new();

    let mut rng = rng_from(11);
    let a = Tensor::from_fn([32, 32], |_| rng.random_range(0..200) as f64);
    let b = a.map(|v| v + 16.0);
    let expected = 20.0 * (255.0f64 / 16.0).log10();
    out.push(OracleResult::from_result(
        "psnr_offset_16",
        0.01,
        psnr(&a, &b, 255.0).map(|p| ((p - 24.05).abs(), format!("PSNR {:.4} dB, closed form {:.4} dB", p, expected))),
    ));
    out.push(OracleResult::from_result(
        "ssim_identity",
        1e-12,
        ssim(&a, &a, 255.0).map(|s| ((s - 1.0).abs(), format!("SSIM(a, a) = {}", s))),
    ));

    let gt = Tensor::from_fn([10, 10], |i| if i % 10 == 0 { 1.0 } else { 0.0 });
    let soft = Tensor::full([10, 10], 0.5);
    let f = pr_curve(&[soft], &[gt], &thresholds(101), Pooling::Micro).and_then(|c| {
        let p = c
            .points
            .iter()
            .filter(|p| p.threshold <= 0.5)
            .map(|p| p.f_score())
            .fold(f64::NAN, f64::max);
        Ok(((p - 2.0 / 11.0).abs().max((p - 0.1818).abs()), format!("F = {:.6} at thresholds <= 0.5", p)))
    });
    out.push(OracleResult::from_result("f_score_constant_half", 1e-4, f));

    let pmf = (|| -> Result<(f64, String)> {
        let mut worst = 0.0f64;
        for (mu, log_s) in [(3.7, -1.0), (0.0, 0.5), (31.0, 1.5), (12.2, -3.0), (-2.0, 2.0)] {
            let levels = 32;
            let tape = Tape::<f64>::new();
            // One item per value.
            let y = Tensor::from_fn([levels, 1, 1, 1], |i| i as f64);
            let mu_v = tape.constant(Tensor::full([levels, 1, 1, 1], mu));
            let ls_v = tape.constant(Tensor::full([levels, 1, 1, 1], log_s));
            let (lp, _) = factored_logistic_logprob(&y, mu_v, ls_v, levels)?;
            let total: f64 = lp.value().data().iter().map(|l| l.exp()).sum();
            worst = worst.max((total - 1.0).abs());
        }
        Ok((worst, "5 (location, scale) pairs, 32 levels".into()))
    })();
    out.push(OracleResult::from_result("logistic_pmf_sum", 1e-9, pmf));

    let bern = (|| -> Result<(f64, String)> {
        let mut worst = 0.0f64;
        for &beta in &[0.1, 0.5, 0.9] {
            for &logit in &[-3.0, -0.2, 0.0, 1.7, 6.0] {
                let tape = Tape::<f64>::new();
                let y = Tensor::new([2, 1, 1, 1], vec![0.0, 1.0])?;
                let l = tape.constant(Tensor::full([2, 1, 1, 1], logit));
                let (_, norm) = weighted_bernoulli_logprob(&y, l, beta)?;
                let total: f64 = norm.value().data().iter().map(|v| v.exp()).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        Ok((worst, "3 weights x 5 logits".into()))
    })();
    out.push(OracleResult::from_result("bernoulli_normalization", 1e-12, bern));
    out
}

/// Random volume-preserving flow: orthogonal 1×1 convolutions and
/// shift-only couplings with perturbed networks.
pub fn volume_preserving_flow(seed: u64, squeeze: bool) -> Result<FlowModel<f64>> {
    let cfg = ModelConfig {
        channels: 2,
        height: if squeeze { 4 } else { 1 },
        width: if squeeze { 4 } else { 1 },
        levels: if squeeze { 2 } else { 1 },
        steps_per_level: 2,
        squeeze,
        split: squeeze,
        hidden_channels: 8,
        variant: Variant::VolumePreserving,
        activation_norm: ActivationNorm::None,
        ..ModelConfig::default()
    };
    let mut m = FlowModel::new(cfg, &mut rng_from(seed))?;
    // Perturbing anything but the 1×1 convolutions keeps them orthogonal.
    let ids: Vec<_> = m.params.ids().filter(|&id| !m.params.name(id).contains("invconv")).collect();
    let mut sub = ParamStore::new();
    for &id in &ids {
        sub.add(m.params.name(id), m.params.get(id).clone());
    }
    perturb_params(&mut sub, 0.3, &mut rng_from(indexed_seed(seed, 1)));
    for (k, &id) in ids.iter().enumerate() {
        m.params.set(id, sub.params()[k].value.clone())?;
    }
    Ok(m)
}

pub fn metric_axiom_oracle(n_triples: usize, seed: u64) -> OracleResult {
    let r = (|| -> Result<(f64, String)> {
        let flow = volume_preserving_flow(seed, true)?;
        let fm = FlowMetric::new(&flow, None)?;
        let report = metric_axiom_check(&fm, n_triples, &mut rng_from(indexed_seed(seed, 2)))?;
        Ok((
            report.violations() as f64,
            format!("{} triples, largest triangle excess {:.3e}", report.triples, report.max_triangle_excess),
        ))
    })();
    let mut res = OracleResult::from_result("metric_axioms", 0.5, r);
    res.detail = format!("{} (tolerance per axiom {:.0e})", res.detail, AXIOM_TOL);
    res
}
