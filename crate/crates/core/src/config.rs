//! Run configuration files.
//!
//! A run is described by a TOML file with the sections `[run]`, `[data]`,
//! `[model]`, `[train]`, `[eval]` and `[sample]`. Only `data.kind` and
//! `train.iterations` are required. [`RunConfig::resolved`] fills in the
//! data-dependent defaults so the snapshot written next to a run
//! reproduces it exactly.

use std::path::PathBuf;

use ndtensor::DType;
use serde::{Deserialize, Serialize};

use crate::data::{DataSpec, PairedSample, TargetKind};
use crate::dequant::DequantSpec;
use crate::error::{config_err, FlowError, Result};
use crate::flow::{ActivationNorm, CondShape, ModelConfig, Variant};
use crate::rng::{stream_seed, Stream};
use crate::train::{split_validation, TrainConfig};

/// First item index of the held-out test set in the data stream.
pub const TEST_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; data, initialisation, batches, dequantisation noise,
    /// evaluation and sampling each get their own stream derived from it.
    pub seed: u64,
    pub dtype: Precision,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: Precision::F32,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to 2 for images and 1 for 2-D points.
    pub levels: Option<usize>,
    pub steps_per_level: usize,
    /// Defaults to true for images and false for 2-D points.
    pub squeeze: Option<bool>,
    pub split: Option<bool>,
    pub hidden_channels: usize,
    pub cond_features: usize,
    pub variant: Variant,
    pub activation_norm: ActivationNorm,
    pub coupling_instance_norm: bool,
    /// Condition on `x` when the dataset has one; when false the flow
    /// models the marginal of `y`.
    pub conditional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            levels: None,
            steps_per_level: m.steps_per_level,
            squeeze: None,
            split: None,
            hidden_channels: m.hidden_channels,
            cond_features: m.cond_features,
            variant: m.variant,
            activation_norm: m.activation_norm,
            coupling_instance_norm: m.coupling_instance_norm,
            conditional: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequantChoice {
    /// `none` for continuous targets, `uniform` for integers, `binary` for
    /// masks.
    Auto,
    None,
    Uniform,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub augment: bool,
    /// Generated items; the last 10% are held out for validation.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_dequant")]
    pub dequantizer: DequantChoice,
    #[serde(default = "d_dq_hidden")]
    pub dequant_hidden: usize,
    #[serde(default = "d_dq_features")]
    pub dequant_features: usize,
}

fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    1e-3
}
fn d_clip() -> f64 {
    50.0
}
fn d_samples() -> usize {
    1000
}
fn d_dequant() -> DequantChoice {
    DequantChoice::Auto
}
fn d_dq_hidden() -> usize {
    16
}
fn d_dq_features() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub test_samples: usize,
    pub batch_size: usize,
    /// Thresholds of the precision/recall sweep for binary targets.
    pub pr_thresholds: usize,
    /// Samples averaged into the soft image per input for binary targets.
    pub soft_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_samples: 200,
            batch_size: 32,
            pr_thresholds: 101,
            soft_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub temperatures: Vec<f64>,
    /// Samples per conditioning input and temperature.
    pub n: usize,
    /// Conditioning inputs taken from the test set.
    pub inputs: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            temperatures: vec![0.0, 0.5, 1.0],
            n: 4,
            inputs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sample: SampleSection,
}

impl RunConfig {
    /// Parses and validates a configuration.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FlowError::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    fn is_point_data(&self) -> bool {
        matches!(self.data, DataSpec::TwoD { .. })
    }

    /// Copy with every data-dependent default made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let point = self.is_point_data();
        c.model.levels.get_or_insert(if point { 1 } else { 2 });
        c.model.squeeze.get_or_insert(!point);
        c.model.split.get_or_insert(!point);
        if c.train.dequantizer == DequantChoice::Auto {
            c.train.dequantizer = match self.data.target() {
                TargetKind::Continuous => DequantChoice::None,
                TargetKind::Integer { .. } => DequantChoice::Uniform,
                TargetKind::Binary => DequantChoice::Binary,
            };
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config().validate()?;
        if self.train.samples < 10 {
            return config_err("train.samples must be at least 10 (10% is held out)");
        }
        if self.train.augment && self.is_point_data() {
            return config_err("train.augment needs image data");
        }
        if self.eval.test_samples == 0 || self.eval.batch_size == 0 {
            return config_err("eval.test_samples and eval.batch_size must be positive");
        }
        if self.sample.temperatures.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return config_err("sample.temperatures must be finite and non-negative");
        }
        let r = self.resolved();
        match (self.data.target(), r.train.dequantizer) {
            (TargetKind::Continuous, DequantChoice::None)
            | (TargetKind::Integer { .. }, DequantChoice::Uniform)
            | (TargetKind::Binary, DequantChoice::Uniform | DequantChoice::Binary) => {}
            (target, d) => {
                return config_err(format!("train.dequantizer = {:?} does not fit {:?} targets", d, target));
            }
        }
        if r.train.dequantizer == DequantChoice::Binary && self.conditional() {
            let [_, h, w] = self.data.y_shape();
            let x = self.data.x_shape().expect("conditional data");
            if (x[1], x[2]) != (h, w) {
                return config_err("binary dequantization needs the conditioning input at the target resolution");
            }
        }
        // Surface architecture errors (odd channels, squeeze divisibility)
        // at load time.
        crate::FlowModel::<f32>::new(self.model_config(), &mut crate::rng::rng_from(0))?;
        Ok(())
    }

    pub fn conditional(&self) -> bool {
        self.model.conditional && self.data.x_shape().is_some()
    }

    pub fn model_config(&self) -> ModelConfig {
        let r = self.resolved();
        let [channels, height, width] = self.data.y_shape();
        let cond = self
            .data
            .x_shape()
            .filter(|_| self.conditional())
            .map(|[c, h, w]| CondShape {
                channels: c,
                height: h,
                width: w,
            });
        ModelConfig {
            channels,
            height,
            width,
            cond,
            levels: r.model.levels.expect("resolved"),
            steps_per_level: r.model.steps_per_level,
            squeeze: r.model.squeeze.expect("resolved"),
            split: r.model.split.expect("resolved"),
            hidden_channels: r.model.hidden_channels,
            cond_features: r.model.cond_features,
            variant: r.model.variant,
            activation_norm: r.model.activation_norm,
            coupling_instance_norm: r.model.coupling_instance_norm,
        }
    }

    pub fn dequant_spec(&self) -> DequantSpec {
        match self.resolved().train.dequantizer {
            DequantChoice::Auto | DequantChoice::None => DequantSpec::Identity,
            DequantChoice::Uniform => DequantSpec::Uniform {
                levels: match self.data.target() {
                    TargetKind::Integer { levels } => levels,
                    _ => 2,
                },
            },
            DequantChoice::Binary => DequantSpec::Binary {
                hidden_channels: self.train.dequant_hidden,
                context_features: self.train.dequant_features,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            eval_every: self.train.eval_every,
            augment: self.train.augment,
            fault_at: None,
        }
    }

    pub fn data_seed(&self) -> u64 {
        stream_seed(self.run.seed, Stream::Data)
    }

    /// `(train, validation)` split of the generated training items.
    pub fn training_data(&self) -> (Vec<PairedSample>, Vec<PairedSample>) {
        split_validation(self.data.generate(self.data_seed(), 0..self.train.samples as u64))
    }

    pub fn test_data(&self) -> Vec<PairedSample> {
        self.data
            .generate(self.data_seed(), TEST_OFFSET..TEST_OFFSET + self.eval.test_samples as u64)
    }
}
