use ndtensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{
    zeros_per_item, ActNorm, AffineCoupling, Conditioner, Context, FlowLayer, InstanceNormFlow, InvConv1x1, Mode, Prior,
    SplitPrior, Squeeze,
};
use crate::error::{config_err, FlowError, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::FlowRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Couplings shift and scale.
    Affine,
    /// Couplings only shift; their log-determinant is exactly 0.
    VolumePreserving,
}

/// Normalisation layer at the start of every flow step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationNorm {
    ActNorm,
    InstanceNorm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Shape of the conditioning input; `None` builds an unconditional flow.
    pub cond: Option<CondShape>,
    pub levels: usize,
    pub steps_per_level: usize,
    /// Squeeze at the start of every level.
    pub squeeze: bool,
    /// Factor out half the channels between levels.
    pub split: bool,
    pub hidden_channels: usize,
    pub cond_features: usize,
    pub variant: Variant,
    pub activation_norm: ActivationNorm,
    /// Instance norm inside the coupling networks.
    pub coupling_instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 16,
            width: 16,
            cond: None,
            levels: 2,
            steps_per_level: 2,
            squeeze: true,
            split: true,
            hidden_channels: 32,
            cond_features: 16,
            variant: Variant::Affine,
            activation_norm: ActivationNorm::ActNorm,
            coupling_instance_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub enum Step<T: Scalar> {
    Layer(Box<dyn FlowLayer<T>>),
    Split(SplitPrior),
}

/// Result of pushing `y` through the flow.
pub struct Encoded<'t, T: Scalar> {
    /// Factored-out parts in order, then the final latent.
    pub latents: Vec<Var<'t, T>>,
    /// Sum of layer log-determinants, per item.
    pub logdet: Var<'t, T>,
    /// Split-prior and final-prior log-densities, per item.
    pub log_prior: Var<'t, T>,
}

impl<'t, T: Scalar> Encoded<'t, T> {
    /// `log p(y | x)` per item.
    pub fn log_prob(&self) -> Result<Var<'t, T>> {
        Ok(self.log_prior.add(&self.logdet)?)
    }
}

/// Where decoding takes its latents from.
pub enum Latents<'t, 'r, T: Scalar> {
    /// Exactly the parts produced by [`FlowModel::encode_with`].
    Given(Vec<Var<'t, T>>),
    /// Draw from the priors with temperature `tau`.
    Sample { tau: f64, rng: &'r mut FlowRng },
}

/// Multi-scale conditional flow: `L` levels of
/// `[squeeze] → K × (norm → 1×1 conv → coupling) → [split]`, a conditioning
/// network, and a Gaussian prior on the final latent.
pub struct FlowModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    steps: Vec<Step<T>>,
    prior: Prior,
    conditioner: Option<Conditioner>,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(config: ModelConfig, rng: &mut FlowRng) -> Result<Self> {
        let c = &config;
        if c.channels == 0 || c.height == 0 || c.width == 0 {
            return config_err("model.channels, model.height and model.width must be positive");
        }
        if c.levels == 0 {
            return config_err("model.levels must be at least 1");
        }
        if c.hidden_channels == 0 {
            return config_err("model.hidden_channels must be positive");
        }

        // Walk the shapes once to learn which resolutions need features.
        let mut shape = [c.channels, c.height, c.width];
        let mut resolutions = Vec::new();
        for level in 0..c.levels {
            if c.squeeze {
                if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                    return config_err(format!(
                        "level {} squeezes a {}x{} activation; model.height and model.width must be divisible by 2^levels",
                        level, shape[1], shape[2]
                    ));
                }
                shape = [shape[0] * 4, shape[1] / 2, shape[2] / 2];
            }
            resolutions.push((shape[1], shape[2]));
            if c.split && level + 1 < c.levels {
                shape[0] /= 2;
            }
        }
        resolutions.dedup();

        let mut params = ParamStore::new();
        let conditioner = match c.cond {
            Some(cs) => {
                if c.cond_features == 0 {
                    return config_err("model.cond_features must be positive for a conditional model");
                }
                Some(Conditioner::new(
                    &mut params,
                    "cond",
                    [cs.channels, cs.height, cs.width],
                    c.cond_features,
                    &resolutions,
                    rng,
                )?)
            }
            None => None,
        };
        let cond_ch = conditioner.as_ref().map_or(0, |g| g.channels());

        let mut steps: Vec<Step<T>> = Vec::new();
        let mut shape = [c.channels, c.height, c.width];
        for level in 0..c.levels {
            if c.squeeze {
                let sq = Squeeze::new(&format!("level{}.squeeze", level));
                shape = FlowLayer::<T>::output_shape(&sq, shape);
                steps.push(Step::Layer(Box::new(sq)));
            }
            for k in 0..c.steps_per_level {
                let name = format!("level{}.step{}", level, k);
                match c.activation_norm {
                    ActivationNorm::ActNorm => {
                        steps.push(Step::Layer(Box::new(ActNorm::new(&mut params, &format!("{}.actnorm", name), shape[0]))))
                    }
                    ActivationNorm::InstanceNorm => {
                        if shape[1] * shape[2] < 2 {
                            return config_err("instance normalisation needs more than one pixel per channel");
                        }
                        steps.push(Step::Layer(Box::new(InstanceNormFlow::new(
                            &mut params,
                            &format!("{}.instnorm", name),
                            shape[0],
                        ))))
                    }
                    ActivationNorm::None => {}
                }
                steps.push(Step::Layer(Box::new(InvConv1x1::new(&mut params, &format!("{}.invconv", name), shape[0], rng))));
                steps.push(Step::Layer(Box::new(AffineCoupling::new(
                    &mut params,
                    &format!("{}.coupling", name),
                    shape,
                    cond_ch,
                    c.hidden_channels,
                    c.coupling_instance_norm,
                    c.variant,
                    rng,
                )?)));
            }
            if c.split && level + 1 < c.levels {
                let split = SplitPrior::new(&mut params, &format!("level{}.split", level), shape, cond_ch, rng)?;
                shape[0] = split.kept_channels();
                steps.push(Step::Split(split));
            }
        }
        let prior = Prior::new(&mut params, "prior", shape, cond_ch, rng);
        Ok(Self {
            config,
            params,
            steps,
            prior,
            conditioner,
        })
    }

    pub fn steps(&self) -> &[Step<T>] {
        &self.steps
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn is_conditional(&self) -> bool {
        self.conditioner.is_some()
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Names of the invertible layers in forward order (splits included).
    pub fn layer_names(&self) -> Vec<String> {
        self.steps
            .iter()
            .map(|s| match s {
                Step::Layer(l) => l.name().to_string(),
                Step::Split(sp) => sp.name().to_string(),
            })
            .collect()
    }

    fn check_shapes(&self, y_shape: &[usize], x: Option<&[usize]>) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.height, c.width];
        if y_shape.len() != 4 || y_shape[1..] != want {
            return config_err(format!("model expects targets [N, {}, {}, {}], got {:?}", want[0], want[1], want[2], y_shape));
        }
        match (c.cond, x) {
            (None, None) => Ok(()),
            (None, Some(_)) => config_err("unconditional model was given a conditioning input"),
            (Some(_), None) => config_err("conditional model needs a conditioning input"),
            (Some(cs), Some(xs)) => {
                if xs != [y_shape[0], cs.channels, cs.height, cs.width] {
                    return config_err(format!(
                        "model expects conditioning [{}, {}, {}, {}], got {:?}",
                        y_shape[0], cs.channels, cs.height, cs.width, xs
                    ));
                }
                Ok(())
            }
        }
    }

    /// Builds the conditioning context (runs `g(x)` for conditional models).
    pub fn context<'t>(&self, p: &Bound<'t, T>, x: Option<Var<'t, T>>, mode: Mode) -> Result<Context<'t, T>> {
        match (&self.conditioner, x) {
            (Some(g), Some(x)) => {
                let feats = g.forward(p, x).map_err(|e| e.in_layer("cond"))?;
                Ok(Context::new(Some(x), feats, mode))
            }
            (None, None) => Ok(Context::unconditional(mode)),
            (Some(_), None) => config_err("conditional model needs a conditioning input"),
            (None, Some(_)) => config_err("unconditional model was given a conditioning input"),
        }
    }

    /// `y → z` on a tape; `log p(y|x) = log_prior + logdet`.
    pub fn encode_with<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<Encoded<'t, T>> {
        let mut h = y;
        let mut logdet = zeros_per_item(y);
        let mut log_prior = zeros_per_item(y);
        let mut latents = Vec::new();
        for step in &self.steps {
            match step {
                Step::Layer(layer) => {
                    let (z, ld) = layer.forward(p, h, ctx)?;
                    logdet = logdet.add(&ld)?;
                    h = z;
                }
                Step::Split(split) => {
                    let (z0, z1, lp) = split.forward(p, h, ctx)?;
                    log_prior = log_prior.add(&lp)?;
                    latents.push(z1);
                    h = z0;
                }
            }
        }
        log_prior = log_prior.add(&self.prior.log_prob(p, h, ctx)?)?;
        latents.push(h);
        let enc = Encoded {
            latents,
            logdet,
            log_prior,
        };
        if !enc.log_prob()?.value().is_finite() {
            return Err(FlowError::NonFinite {
                layer: "prior".into(),
                detail: "log-likelihood is not finite".into(),
            });
        }
        Ok(enc)
    }

    /// `z → y`; returns `y` and the log-determinant of the inverse pass.
    pub fn decode_with<'t>(
        &self,
        p: &Bound<'t, T>,
        latents: Latents<'t, '_, T>,
        ctx: &Context<'t, T>,
        n: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (mut given, mut sampler) = match latents {
            Latents::Given(v) => (Some(v), None),
            Latents::Sample { tau, rng } => {
                if !(tau >= 0.0) {
                    return config_err(format!("temperature must be non-negative, got {}", tau));
                }
                (None, Some((tau, rng)))
            }
        };
        let mut h = match (&mut given, &mut sampler) {
            (Some(v), _) => {
                let expected = self.steps.iter().filter(|s| matches!(s, Step::Split(_))).count() + 1;
                if v.len() != expected {
                    return config_err(format!("decode needs {} latent parts, got {}", expected, v.len()));
                }
                v.pop().expect("non-empty")
            }
            (None, Some((tau, rng))) => self.prior.sample(p, ctx, n, *tau, *rng)?,
            (None, None) => unreachable!(),
        };
        let mut logdet = zeros_per_item(h);
        for step in self.steps.iter().rev() {
            match step {
                Step::Layer(layer) => {
                    let (y, ld) = layer.inverse(p, h, ctx)?;
                    logdet = logdet.add(&ld)?;
                    h = y;
                }
                Step::Split(split) => {
                    h = match (&mut given, &mut sampler) {
                        (Some(v), _) => split.inverse(h, v.pop().expect("counted"))?,
                        (None, Some((tau, rng))) => split.sample(p, h, ctx, *tau, *rng)?.0,
                        (None, None) => unreachable!(),
                    };
                }
            }
        }
        Ok((h, logdet))
    }

    /// `log p(y | x)` per item in evaluation mode.
    pub fn log_prob(&self, y: &Tensor<T>, x: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (latents, logdet, lp) = self.encode(y, x)?;
        drop(latents);
        Ok(lp.zip_map(&logdet, |a, b| a + b)?)
    }

    /// Evaluation-mode encode: `(latents, logdet, log_prior)` as values.
    pub fn encode(&self, y: &Tensor<T>, x: Option<&Tensor<T>>) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        self.check_shapes(y.shape(), x.map(|t| t.shape()))?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let ctx = self.context(&p, x.map(|x| tape.constant(x.clone())), Mode::Eval)?;
        let enc = self.encode_with(&p, tape.constant(y.clone()), &ctx)?;
        let latents = enc.latents.iter().map(|v| (*v.value()).clone()).collect();
        Ok((latents, (*enc.logdet.value()).clone(), (*enc.log_prior.value()).clone()))
    }

    /// Inverse of [`FlowModel::encode`] given all latent parts.
    pub fn decode(&self, latents: &[Tensor<T>], x: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let n = latents.last().map_or(0, |z| z.shape()[0]);
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let ctx = self.context(&p, x.map(|x| tape.constant(x.clone())), Mode::Eval)?;
        let given = latents.iter().map(|z| tape.constant(z.clone())).collect();
        let (y, _) = self.decode_with(&p, Latents::Given(given), &ctx, n)?;
        Ok((*y.value()).clone())
    }

    /// `n` samples with every base distribution at temperature `tau`. For a
    /// conditional model `x` supplies one conditioning input per sample.
    pub fn sample(&self, x: Option<&Tensor<T>>, n: usize, tau: f64, rng: &mut FlowRng) -> Result<Tensor<T>> {
        if let Some(x) = x {
            if x.shape().first() != Some(&n) {
                return config_err(format!("sample count {} does not match conditioning batch {:?}", n, x.shape()));
            }
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let ctx = self.context(&p, x.map(|x| tape.constant(x.clone())), Mode::Eval)?;
        let (y, _) = self.decode_with(&p, Latents::Sample { tau, rng }, &ctx, n)?;
        Ok((*y.value()).clone())
    }

    /// Data-dependent initialisation from one batch (ActNorm parameters,
    /// instance-norm running statistics).
    pub fn data_init(&mut self, y: &Tensor<T>, x: Option<&Tensor<T>>) -> Result<()> {
        self.check_shapes(y.shape(), x.map(|t| t.shape()))?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let ctx = self.context(&p, x.map(|x| tape.constant(x.clone())), Mode::Init)?;
        self.encode_with(&p, tape.constant(y.clone()), &ctx)?;
        let records = ctx.take_records();
        drop(p);
        for (id, v) in records {
            self.params.set(id, v)?;
        }
        Ok(())
    }

    /// Shapes `[C, H, W]` of the latent parts in [`Encoded::latents`] order.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        let c = &self.config;
        let mut shape = [c.channels, c.height, c.width];
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                Step::Layer(l) => shape = l.output_shape(shape),
                Step::Split(s) => {
                    out.push([shape[0] - s.kept_channels(), shape[1], shape[2]]);
                    shape[0] = s.kept_channels();
                }
            }
        }
        out.push(shape);
        out
    }

    /// Errors unless every layer has unit Jacobian determinant: shift-only
    /// couplings, no activation normalisation, and 1×1 convolutions with
    /// `|det W| = 1`.
    pub fn check_volume_preserving(&self, tol: f64) -> Result<()> {
        let c = &self.config;
        if c.variant != Variant::VolumePreserving {
            return config_err("flow is not volume preserving: model.variant must be volume_preserving");
        }
        if c.activation_norm != ActivationNorm::None {
            return config_err("flow is not volume preserving: model.activation_norm must be none");
        }
        for p in self.params.params() {
            if p.name.ends_with("invconv.weight") {
                let w = p.value.reshape([p.value.shape()[0], p.value.shape()[1]])?;
                let lad = ndtensor::linalg::det(&w)?.as_f64().abs().ln();
                if lad.abs() > tol {
                    return config_err(format!("flow is not volume preserving: {} has log|det| {:.3e}", p.name, lad));
                }
            }
        }
        Ok(())
    }

    /// Validates target and conditioning shapes against the configuration.
    pub fn validate_inputs(&self, y: &[usize], x: Option<&[usize]>) -> Result<()> {
        self.check_shapes(y, x)
    }
}
