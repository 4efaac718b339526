//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances, seeds and runtime budgets are fixed here.

use std::time::{Duration, Instant};

use condflow::checkpoint;
use condflow::data::{DataSpec, PairedSample};
use condflow::dequant::{DequantSpec, Dequantizer};
use condflow::flow::{perturb_params, ActivationNorm, CondShape, Variant};
use condflow::rng::{indexed_seed, rng_from};
use condflow::train::{
    evaluate, matched_width, split_validation, trace_csv, train, BaselineKind, CnfObjective, FactoredBaseline,
    TrainConfig,
};
use condflow::verify::{self, OracleResult};
use condflow::{FlowModel, ModelConfig};
use ndtensor::Scalar;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Largest relative parameter-count gap between a flow and its baseline.
const PARAM_MATCH_TOL: f64 = 0.05;

fn matched_baseline_width(kind: BaselineKind, shape: [usize; 3], x_shape: [usize; 3], target: usize) -> condflow::Result<usize> {
    let (hidden, rel) = matched_width(kind, shape, x_shape, target)?;
    if rel > PARAM_MATCH_TOL {
        return Err(condflow::FlowError::Config(format!(
            "baseline parameter count is {:.1}% off the flow's {}",
            rel * 100.0,
            target
        )));
    }
    Ok(hidden)
}

struct Outcome {
    passed: bool,
    summary: String,
}

fn oracles(results: &[OracleResult]) -> Outcome {
    Outcome {
        passed: results.iter().all(|r| r.passed),
        summary: results
            .iter()
            .map(|r| format!("{} {:.2e} < {:.0e}", r.name, r.measured, r.tolerance))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn criterion(number: usize, name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "criterion {:>2} {:<24} {}  {} [{:.1} s of {} s]{}",
        number,
        name,
        if passed { "PASS" } else { "FAIL" },
        out.summary,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " over budget" }
    );
    passed
}

// ---------------------------------------------------------------------------
// Criterion 5: conditional 2-D toy, flow against a factored Gaussian.

const TWO_D_ITERATIONS: usize = 2000;
const TWO_D_MIN_GAP: f64 = 0.1;

fn two_d_flow_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        height: 1,
        width: 1,
        cond: Some(CondShape {
            channels: 1,
            height: 1,
            width: 1,
        }),
        levels: 1,
        steps_per_level: 4,
        squeeze: false,
        split: false,
        hidden_channels: 32,
        cond_features: 16,
        variant: Variant::Affine,
        activation_norm: ActivationNorm::ActNorm,
        coupling_instance_norm: false,
    }
}

fn data_split(spec: &DataSpec, seed: u64, n_train: u64, n_test: u64) -> (Vec<PairedSample>, Vec<PairedSample>, Vec<PairedSample>) {
    let (tr, val) = split_validation(spec.generate(seed, 0..n_train));
    let test = spec.generate(seed, 1 << 40..(1 << 40) + n_test);
    (tr, val, test)
}

/// `(flow nll/dim, baseline nll/dim)` on the test set.
fn two_d_seed(seed: u64) -> condflow::Result<(f64, f64)> {
    let spec = DataSpec::TwoD { conditional: true };
    let (tr, val, test) = data_split(&spec, indexed_seed(seed, 0), 2000, 2000);
    let tc = TrainConfig {
        iterations: TWO_D_ITERATIONS,
        batch_size: 64,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let cfg = two_d_flow_config();
    let model = FlowModel::<f64>::new(cfg, &mut rng_from(indexed_seed(seed, 1)))?;
    let flow_params = model.num_params();
    let mut flow = CnfObjective {
        model,
        dequantizer: Dequantizer::Identity,
    };
    train(&mut flow, &tr, &val, true, &tc, indexed_seed(seed, 2), |_| {}).map_err(|a| a.error)?;
    let flow_nll = evaluate(&flow, &test, true, 500, &mut rng_from(0))?.nll_nats / 2.0;

    let hidden = matched_baseline_width(BaselineKind::Gaussian, [2, 1, 1], [1, 1, 1], flow_params)?;
    let mut base = FactoredBaseline::<f64>::new(BaselineKind::Gaussian, [2, 1, 1], [1, 1, 1], hidden, &mut rng_from(indexed_seed(seed, 3)))?;
    train(&mut base, &tr, &val, true, &tc, indexed_seed(seed, 2), |_| {}).map_err(|a| a.error)?;
    let base_nll = evaluate(&base, &test, true, 500, &mut rng_from(0))?.nll_nats / 2.0;
    Ok((flow_nll, base_nll))
}

fn criterion_5() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        match two_d_seed(seed) {
            Ok((f, b)) => {
                if b - f >= TWO_D_MIN_GAP {
                    wins += 1;
                }
                parts.push(format!("{:.3}", b - f));
            }
            Err(e) => parts.push(format!("error {}", e)),
        }
    }
    Outcome {
        passed: wins == SEEDS.len(),
        summary: format!(
            "gap >= {} nats/dim in {}/{} seeds (gaps {})",
            TWO_D_MIN_GAP,
            wins,
            SEEDS.len(),
            parts.join(", ")
        ),
    }
}

// ---------------------------------------------------------------------------
// Criterion 6: toy vessels, binary against uniform dequantization and the
// weighted Bernoulli baseline.

const VESSEL_SIZE: usize = 16;
const VESSEL_ITERATIONS: usize = 1000;
const BERNOULLI_BETA: f64 = 0.1;

fn vessel_flow_config() -> ModelConfig {
    let s = VESSEL_SIZE;
    ModelConfig {
        channels: 1,
        height: s,
        width: s,
        cond: Some(CondShape {
            channels: 1,
            height: s,
            width: s,
        }),
        levels: 2,
        steps_per_level: 2,
        squeeze: true,
        split: true,
        hidden_channels: 16,
        cond_features: 8,
        variant: Variant::Affine,
        activation_norm: ActivationNorm::ActNorm,
        coupling_instance_norm: false,
    }
}

enum VesselRun {
    Bpd(f64),
    Abort(String),
}

/// Test bpd (or the abort) and the total parameter count of flow plus
/// dequantizer.
fn vessel_cnf(dq: DequantSpec, seed: u64, data: &(Vec<PairedSample>, Vec<PairedSample>, Vec<PairedSample>), tc: &TrainConfig) -> condflow::Result<(VesselRun, usize)> {
    let cfg = vessel_flow_config();
    let mut rng = rng_from(indexed_seed(seed, 1));
    let model = FlowModel::<f32>::new(cfg.clone(), &mut rng)?;
    let dequantizer = Dequantizer::build(dq, &cfg, &mut rng)?;
    let n_params = model.num_params() + dequantizer.num_params();
    let mut obj = CnfObjective { model, dequantizer };
    if let Err(a) = train(&mut obj, &data.0, &data.1, true, tc, indexed_seed(seed, 2), |_| {}) {
        return Ok((VesselRun::Abort(a.to_string()), n_params));
    }
    Ok((VesselRun::Bpd(evaluate(&obj, &data.2, true, 50, &mut rng_from(0))?.bpd), n_params))
}

/// `(binary, uniform, bernoulli)` test bpd.
fn vessel_seed(seed: u64) -> condflow::Result<(VesselRun, VesselRun, f64)> {
    let spec = DataSpec::ToyVessels { size: VESSEL_SIZE };
    let data = data_split(&spec, indexed_seed(seed, 0), 400, 100);
    let tc = TrainConfig {
        iterations: VESSEL_ITERATIONS,
        batch_size: 8,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let (binary, binary_params) = vessel_cnf(
        DequantSpec::Binary {
            hidden_channels: 8,
            context_features: 8,
        },
        seed,
        &data,
        &tc,
    )?;
    let (uniform, _) = vessel_cnf(DequantSpec::Uniform { levels: 2 }, seed, &data, &tc)?;
    let kind = BaselineKind::Bernoulli { beta: BERNOULLI_BETA };
    let s = VESSEL_SIZE;
    let hidden = matched_baseline_width(kind, [1, s, s], [1, s, s], binary_params)?;
    let mut base = FactoredBaseline::<f32>::new(kind, [1, s, s], [1, s, s], hidden, &mut rng_from(indexed_seed(seed, 3)))?;
    train(&mut base, &data.0, &data.1, true, &tc, indexed_seed(seed, 2), |_| {}).map_err(|a| a.error)?;
    let bern = evaluate(&base, &data.2, true, 50, &mut rng_from(0))?.bpd;
    Ok((binary, uniform, bern))
}

fn criterion_6() -> Outcome {
    let mut wins = 0;
    let mut binary_aborts = 0;
    let mut parts = Vec::new();
    let show = |r: &VesselRun| match r {
        VesselRun::Bpd(b) => format!("{:.3}", b),
        VesselRun::Abort(_) => "abort".to_string(),
    };
    for seed in SEEDS {
        match vessel_seed(seed) {
            Ok((binary, uniform, bern)) => {
                if let VesselRun::Abort(e) = &binary {
                    binary_aborts += 1;
                    eprintln!("binary run aborted for seed {}: {}", seed, e);
                }
                let beats = match (&binary, &uniform) {
                    (VesselRun::Bpd(b), VesselRun::Bpd(u)) => b < u && *b < bern,
                    (VesselRun::Bpd(b), VesselRun::Abort(_)) => *b < bern,
                    _ => false,
                };
                if beats {
                    wins += 1;
                }
                parts.push(format!("{}/{}/{:.3}", show(&binary), show(&uniform), bern));
            }
            Err(e) => {
                binary_aborts += 1;
                parts.push(format!("error {}", e));
            }
        }
    }
    Outcome {
        passed: wins >= 4 && binary_aborts == 0,
        summary: format!(
            "binary best in {}/{} seeds, {} binary aborts (test bpd binary/uniform/bernoulli: {})",
            wins,
            SEEDS.len(),
            binary_aborts,
            parts.join(", ")
        ),
    }
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism and checkpoint round trips.

fn two_d_trace(seed: u64) -> condflow::Result<String> {
    let spec = DataSpec::TwoD { conditional: true };
    let (tr, val, _) = data_split(&spec, seed, 500, 1);
    let model = FlowModel::<f64>::new(two_d_flow_config(), &mut rng_from(seed))?;
    let mut obj = CnfObjective {
        model,
        dequantizer: Dequantizer::Identity,
    };
    let tc = TrainConfig {
        iterations: 300,
        batch_size: 32,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let rep = train(&mut obj, &tr, &val, true, &tc, seed, |_| {}).map_err(|a| a.error)?;
    Ok(trace_csv(&rep.trace))
}

fn checkpoint_round_trip<T: Scalar>(dir: &std::path::Path) -> condflow::Result<bool> {
    let cfg = vessel_flow_config();
    let mut rng = rng_from(9);
    let mut model = FlowModel::<T>::new(cfg.clone(), &mut rng)?;
    perturb_params(&mut model.params, 0.3, &mut rng);
    let mut dq = Dequantizer::<T>::build(
        DequantSpec::Binary {
            hidden_channels: 8,
            context_features: 8,
        },
        &cfg,
        &mut rng,
    )?;
    if let Some(p) = dq.params_mut() {
        perturb_params(p, 0.3, &mut rng);
    }
    let path = dir.join(format!("model-{:?}.ckpt", T::DTYPE));
    checkpoint::save(&path, &model, &dq, 77)?;
    let back = checkpoint::load::<T>(&path)?;
    let same = |a: &condflow::ParamStore<T>, b: &condflow::ParamStore<T>| {
        a.len() == b.len()
            && a.params().iter().zip(b.params()).all(|(p, q)| {
                p.name == q.name
                    && p.value.shape() == q.value.shape()
                    && p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    };
    Ok(back.iteration == 77
        && back.model.config == model.config
        && same(&back.model.params, &model.params)
        && same(back.dequantizer.params().expect("binary"), dq.params().expect("binary")))
}

fn criterion_10() -> Outcome {
    let traces = (two_d_trace(5), two_d_trace(5));
    let trace_ok = matches!(&traces, (Ok(a), Ok(b)) if a == b && !a.is_empty());
    let dir = tempfile::tempdir().expect("temporary directory");
    let ck64 = checkpoint_round_trip::<f64>(dir.path());
    let ck32 = checkpoint_round_trip::<f32>(dir.path());
    let ck_ok = matches!(ck64, Ok(true)) && matches!(ck32, Ok(true));
    Outcome {
        passed: trace_ok && ck_ok,
        summary: format!(
            "f64 loss trace byte-identical: {} ({} bytes); checkpoint bit-exact f64: {:?}, f32: {:?}",
            trace_ok,
            traces.0.as_ref().map_or(0, |t| t.len()),
            ck64.map_err(|e| e.to_string()),
            ck32.map_err(|e| e.to_string())
        ),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let sizes = verify::CheckSizes::default();
    let results = [
        criterion(1, "invertibility", secs(60), || oracles(&verify::invertibility(100, 1))),
        criterion(2, "jacobian oracle", secs(120), || oracles(&verify::logdet_oracle(20, 2))),
        criterion(3, "normalization", secs(120), || {
            oracles(&[verify::normalization_oracle(3, sizes.normalization_iterations, 400)])
        }),
        criterion(4, "gradients", secs(120), || oracles(&[verify::gradient_oracle(0, verify::Faults::default())])),
        criterion(5, "flow beats factored 2d", secs(600), criterion_5),
        criterion(6, "binary dequant vessels", secs(1200), criterion_6),
        criterion(7, "dequantization validity", secs(300), || {
            oracles(&[verify::elbo_bound_oracle(20, 7), verify::support_oracle(100_000, 7)])
        }),
        criterion(8, "metric golden values", secs(60), || oracles(&verify::metric_golden_values())),
        criterion(9, "flow metric axioms", secs(120), || oracles(&[verify::metric_axiom_oracle(10_000, 9)])),
        criterion(10, "determinism", secs(120), criterion_10),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
