use std::time::Instant;

use ndtensor::{DType, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam};
use super::baselines::FactoredBaseline;
use crate::data::{augment, PairedSample, TargetKind};
use crate::dequant::Dequantizer;
use crate::error::{config_err, FlowError, Result};
use crate::flow::{FlowModel, Mode};
use crate::metrics::bits_per_dim;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{indexed_seed, rng_from, stream_seed, FlowRng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Validation cadence in iterations; with 0 validation runs only after
    /// the last iteration.
    pub eval_every: usize,
    /// Random rotation/scale/shear of image batches.
    pub augment: bool,
    /// Testing hook: at this iteration one parameter (the first coupling
    /// weight, if any) reads as NaN for the forward pass, then is restored.
    #[serde(skip)]
    pub fault_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: 50.0,
            eval_every: 0,
            augment: false,
            fault_at: None,
        }
    }
}

impl TrainConfig {
    /// Batch size used for validation passes.
    pub fn eval_batch(&self) -> usize {
        self.batch_size.max(32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return config_err("train.iterations must be positive");
        }
        if self.batch_size == 0 {
            return config_err("train.batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err(format!("train.lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return config_err("train.clip_norm must be positive");
        }
        Ok(())
    }
}

/// Something trained by maximising a per-item log-likelihood objective.
pub trait Objective<T: Scalar> {
    fn stores(&self) -> Vec<&ParamStore<T>>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>>;
    /// Dimensions of one target, for bits per dimension.
    fn dims(&self) -> usize;
    /// Data-dependent initialisation from the first batch.
    fn init(&mut self, _y: &Tensor<T>, _x: Option<&Tensor<T>>, _rng: &mut FlowRng) -> Result<()> {
        Ok(())
    }
    /// Training objective per item on a tape (one bound store per entry of
    /// [`Objective::stores`]), plus statistics records for the first store.
    fn objective<'t>(
        &self,
        bound: &[Bound<'t, T>],
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        rng: &mut FlowRng,
    ) -> Result<(Var<'t, T>, Vec<(ParamId, Tensor<T>)>)>;
    /// Reported log-likelihood (or its lower bound) per item, evaluation mode.
    fn log_likelihood(&self, y: &Tensor<T>, x: Option<&Tensor<T>>, rng: &mut FlowRng) -> Result<Tensor<T>>;
}

/// A conditional flow with its dequantizer; the objective is the ELBO.
pub struct CnfObjective<T: Scalar> {
    pub model: FlowModel<T>,
    pub dequantizer: Dequantizer<T>,
}

impl<T: Scalar> Objective<T> for CnfObjective<T> {
    fn stores(&self) -> Vec<&ParamStore<T>> {
        let mut out = vec![&self.model.params];
        out.extend(self.dequantizer.params());
        out
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut out = vec![&mut self.model.params];
        out.extend(self.dequantizer.params_mut());
        out
    }

    fn dims(&self) -> usize {
        self.model.dim()
    }

    fn init(&mut self, y: &Tensor<T>, x: Option<&Tensor<T>>, rng: &mut FlowRng) -> Result<()> {
        let v = match &self.dequantizer {
            Dequantizer::Identity => y.clone(),
            Dequantizer::Uniform { levels } => crate::dequant::uniform_dequantize(y, *levels, rng)?.v,
            Dequantizer::Binary(b) => b.dequantize(y, x, rng)?.v,
        };
        let w = self.dequantizer.to_model_space(&v);
        self.model.data_init(&w, x)
    }

    fn objective<'t>(
        &self,
        bound: &[Bound<'t, T>],
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        rng: &mut FlowRng,
    ) -> Result<(Var<'t, T>, Vec<(ParamId, Tensor<T>)>)> {
        self.dequantizer
            .elbo_with_records(&self.model, &bound[0], bound.get(1), y, x, Mode::Train, rng)
    }

    fn log_likelihood(&self, y: &Tensor<T>, x: Option<&Tensor<T>>, rng: &mut FlowRng) -> Result<Tensor<T>> {
        self.dequantizer.elbo(&self.model, y, x, rng)
    }
}

impl<T: Scalar> Objective<T> for FactoredBaseline<T> {
    fn stores(&self) -> Vec<&ParamStore<T>> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        vec![&mut self.params]
    }

    fn dims(&self) -> usize {
        self.shape().iter().product()
    }

    fn objective<'t>(
        &self,
        bound: &[Bound<'t, T>],
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        _rng: &mut FlowRng,
    ) -> Result<(Var<'t, T>, Vec<(ParamId, Tensor<T>)>)> {
        let x = x.ok_or_else(|| FlowError::Config("factored baselines need a conditioning input".into()))?;
        Ok((self.log_likelihood(&bound[0], y, x)?.0, Vec::new()))
    }

    fn log_likelihood(&self, y: &Tensor<T>, x: Option<&Tensor<T>>, _rng: &mut FlowRng) -> Result<Tensor<T>> {
        let x = x.ok_or_else(|| FlowError::Config("factored baselines need a conditioning input".into()))?;
        self.log_prob(y, x)
    }
}

/// Stacks samples into `(y, x)` batches in element type `T`. Integer
/// conditioning images are mapped to the model space of their targets
/// (`x / levels − ½`); `x` is dropped when `conditional` is false.
pub fn to_batch<T: Scalar>(samples: &[&PairedSample], conditional: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (x, y) = crate::data::batch(samples)?;
    let x = conditional.then(|| match samples[0].target {
        TargetKind::Integer { levels } => x.map(|v| v / levels as f64 - 0.5).cast::<T>(),
        _ => x.cast::<T>(),
    });
    Ok((y.cast::<T>(), x))
}

/// 90/10 split into training and validation items.
pub fn split_validation(samples: Vec<PairedSample>) -> (Vec<PairedSample>, Vec<PairedSample>) {
    let n_val = samples.len() / 10;
    let mut train = samples;
    let val = train.split_off(train.len() - n_val);
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Mean training loss per item, in nats.
    pub nll_nats: f64,
    pub bpd: f64,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: &str = "iteration,nll_nats,bpd,wall_ms";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:.17e},{:.17e},{:.3}\n", r.iteration, r.nll_nats, r.bpd, r.wall_ms));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    /// Mean negative (bound on the) log-likelihood per item, in nats.
    pub nll_nats: f64,
    pub bpd: f64,
    pub items: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// `(iteration, validation summary)` at the configured cadence and at
    /// the end of training.
    pub validation: Vec<(usize, EvalSummary)>,
}

/// A training run stopped by an error. The objective still holds the
/// parameters from before the failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: FlowError,
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted at iteration {}: {}", self.iteration, self.error)
    }
}

/// Mean reported NLL over `samples`, evaluated in batches of `batch`.
pub fn evaluate<T: Scalar, O: Objective<T>>(
    obj: &O,
    samples: &[PairedSample],
    conditional: bool,
    batch: usize,
    rng: &mut FlowRng,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return config_err("evaluation needs at least one sample");
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let (y, x) = to_batch::<T>(&refs, conditional)?;
        let ll = obj.log_likelihood(&y, x.as_ref(), rng)?;
        total -= ll.data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    let nll = total / samples.len() as f64;
    Ok(EvalSummary {
        nll_nats: nll,
        bpd: bits_per_dim(nll, obj.dims()),
        items: samples.len(),
    })
}

fn poison<T: Scalar, O: Objective<T>>(obj: &mut O) -> Option<(ParamId, Tensor<T>)> {
    let store = obj.stores_mut().into_iter().next()?;
    let id = store
        .ids()
        .find(|&id| store.name(id).contains("coupling"))
        .or_else(|| store.ids().next())?;
    let saved = store.get(id).clone();
    store.set(id, saved.map(|_| T::nan())).ok()?;
    Some((id, saved))
}

/// Randomness of the validation pass after iteration `it` (0-based), so a
/// reloaded checkpoint can reproduce it.
pub fn validation_rng(seed: u64, it: usize) -> FlowRng {
    rng_from(indexed_seed(stream_seed(seed, Stream::Eval), it as u64))
}

/// Runs the optimisation loop. Randomness is split from `seed` into the
/// batch, augmentation, dequantisation and evaluation streams, so a rerun
/// with the same inputs reproduces the trace; in `f64` the `wall_ms`
/// column is written as 0 to keep traces byte-identical.
pub fn train<T: Scalar, O: Objective<T>>(
    obj: &mut O,
    train_set: &[PairedSample],
    val_set: &[PairedSample],
    conditional: bool,
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&TraceRow),
) -> std::result::Result<TrainReport, TrainAbort> {
    let abort = |error: FlowError, iteration: usize, trace: &[TraceRow]| TrainAbort {
        error,
        iteration,
        trace: trace.to_vec(),
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, 0, &[]));
    }
    if train_set.is_empty() {
        return Err(abort(FlowError::Config("empty training set".into()), 0, &[]));
    }
    let mut batch_rng = rng_from(stream_seed(seed, Stream::Batches));
    let mut dq_rng = rng_from(stream_seed(seed, Stream::Dequant));
    let augment_seed = stream_seed(seed, Stream::Augment);
    let start = Instant::now();
    let deterministic = T::DTYPE == DType::F64;
    let dims = obj.dims();

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut optimizers: Vec<Adam> = obj.stores().iter().map(|s| Adam::new(cfg.lr, *s)).collect();

    let draw_batch = |it: usize, rng: &mut FlowRng| -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut items: Vec<PairedSample> = (0..cfg.batch_size)
            .map(|_| train_set[rng.random_range(0..train_set.len())].clone())
            .collect();
        if cfg.augment {
            for (j, s) in items.iter_mut().enumerate() {
                *s = augment(s, indexed_seed(augment_seed, (it * cfg.batch_size + j) as u64))?;
            }
        }
        let refs: Vec<&PairedSample> = items.iter().collect();
        to_batch(&refs, conditional)
    };

    for it in 0..cfg.iterations {
        let poisoned = if cfg.fault_at == Some(it) { poison(obj) } else { None };
        let step = (|| -> Result<TraceRow> {
            let (y, x) = draw_batch(it, &mut batch_rng)?;
            if it == 0 {
                obj.init(&y, x.as_ref(), &mut rng_from(stream_seed(seed, Stream::Init)))?;
            }
            let tape = Tape::new();
            let bound: Vec<Bound<T>> = obj.stores().iter().map(|s| s.bind(&tape)).collect();
            let xv = x.map(|x| tape.constant(x));
            let (ll, records) = obj.objective(&bound, &y, xv, &mut dq_rng)?;
            let loss = ll.mean()?.neg()?;
            let nll = loss.item().as_f64();
            if !nll.is_finite() {
                return Err(FlowError::NonFinite {
                    layer: "objective".into(),
                    detail: format!("loss {}", nll),
                });
            }
            let grads = tape.backward(loss)?;
            let mut all: Vec<Option<Tensor<T>>> = bound.iter().flat_map(|b| b.gradients(&grads)).collect();
            drop(bound);
            clip_grad_norm(&mut all, cfg.clip_norm);
            let mut offset = 0;
            for (store, opt) in obj.stores_mut().into_iter().zip(optimizers.iter_mut()) {
                let n = store.len();
                opt.step(store, &all[offset..offset + n])?;
                offset += n;
            }
            if let Some(first) = obj.stores_mut().into_iter().next() {
                for (id, v) in records {
                    first.set(id, v)?;
                }
            }
            Ok(TraceRow {
                iteration: it,
                nll_nats: nll,
                bpd: bits_per_dim(nll, dims),
                wall_ms: if deterministic { 0.0 } else { start.elapsed().as_secs_f64() * 1e3 },
            })
        })();
        if let Some((id, value)) = poisoned {
            if let Some(store) = obj.stores_mut().into_iter().next() {
                store.set(id, value).expect("restoring a parameter with its own shape");
            }
        }
        match step {
            Ok(row) => {
                progress(&row);
                trace.push(row);
            }
            Err(e) => return Err(abort(e, it, &trace)),
        }
        let last = it + 1 == cfg.iterations;
        if !val_set.is_empty() && ((cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last) {
            let mut rng = validation_rng(seed, it);
            match evaluate(obj, val_set, conditional, cfg.eval_batch(), &mut rng) {
                Ok(s) => validation.push((it + 1, s)),
                Err(e) => return Err(abort(e, it, &trace)),
            }
        }
    }
    Ok(TrainReport { trace, validation })
}
