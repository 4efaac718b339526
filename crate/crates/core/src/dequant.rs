//! Lifting discrete targets into continuous space.
//!
//! Integer data uses uniform noise in the unit cube above each value. Binary
//! data uses half-infinite noise: `v = 0.5 + sign(y - 0.5) · softplus(u)`
//! with `u` from a small conditional flow over Gaussian noise, so `v > 0.5`
//! exactly when `y = 1`. The flow model itself sees `w`, an affine image of
//! `v` (see [`Dequantizer::to_model_space`]).

use ndtensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, FlowError, Result};
use crate::flow::{
    gaussian_log_prob, AffineCoupling, CondShape, Context, ContextAffine, FlowLayer, FlowModel, InvConv1x1, Mode,
    ModelConfig, Squeeze, Variant,
};
use crate::nn::{kernel_for, Conv, Init};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{randn, FlowRng};

/// Softplus floor keeping `v` off the decision boundary.
pub const SOFTPLUS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DequantSample<T> {
    pub v: Tensor<T>,
    /// `log q(v | y, x)` per item.
    pub logq: Tensor<T>,
    pub y_ref: Tensor<T>,
}

fn check_integer<T: Scalar>(y: &Tensor<T>, levels: usize) -> Result<()> {
    let top = (levels - 1) as f64;
    match y.data().iter().map(|v| v.as_f64()).find(|&v| !(v >= 0.0 && v <= top && v.fract() == 0.0)) {
        Some(bad) => Err(FlowError::Domain(format!("{} is not an integer in [0, {}]", bad, top))),
        None => Ok(()),
    }
}

fn check_binary<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    match y.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        Some(bad) => Err(FlowError::Domain(format!("binary target contains {}", bad))),
        None => Ok(()),
    }
}

/// `v = y + u`, `u ~ U[0, 1)^D`, `log q = 0`.
pub fn uniform_dequantize<T: Scalar>(y: &Tensor<T>, levels: usize, rng: &mut impl Rng) -> Result<DequantSample<T>> {
    check_integer(y, levels)?;
    let n = y.shape().first().copied().unwrap_or(1);
    let v = Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + T::of(rng.random::<f64>()));
    Ok(DequantSample {
        v,
        logq: Tensor::zeros([n]),
        y_ref: y.clone(),
    })
}

/// Inverse of the integer lift: `floor(v)`.
pub fn requantize_integer<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    v.map(|a| a.floor())
}

/// Inverse of the binary lift: `v > 0.5`.
pub fn requantize_binary<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    v.map(|a| if a > half { T::one() } else { T::zero() })
}

/// Inverse softplus, `ln(e^a - 1)`, stable for small and large `a`.
fn softplus_inv(a: f64) -> f64 {
    a + (-(-a).exp_m1()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinaryDequantConfig {
    pub hidden_channels: usize,
    pub context_features: usize,
}

impl Default for BinaryDequantConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            context_features: 8,
        }
    }
}

/// Noise flow `ε → u` for the binary lift, conditioned on `(y, x)`.
///
/// When the target can be squeezed, noise is squeezed, pushed through
/// `context-affine → coupling → 1×1 conv → coupling` at half resolution and
/// unsqueezed. Otherwise (a single pixel) the flow is context-affine only,
/// plus couplings when there are at least two channels.
pub struct BinaryDequantizer<T: Scalar> {
    pub config: BinaryDequantConfig,
    pub params: ParamStore<T>,
    shape: [usize; 3],
    cond: Option<CondShape>,
    squeeze: bool,
    context: [Conv; 2],
    layers: Vec<Box<dyn FlowLayer<T>>>,
}

impl<T: Scalar> BinaryDequantizer<T> {
    pub fn new(config: BinaryDequantConfig, shape: [usize; 3], cond: Option<CondShape>, rng: &mut FlowRng) -> Result<Self> {
        let [c, h, w] = shape;
        if let Some(cs) = cond {
            if (cs.height, cs.width) != (h, w) {
                return config_err(format!(
                    "binary dequantizer needs conditioning at the target resolution {}x{}, got {}x{}",
                    h, w, cs.height, cs.width
                ));
            }
        }
        if config.hidden_channels == 0 || config.context_features == 0 {
            return config_err("dequantizer widths must be positive");
        }
        let squeeze = h % 2 == 0 && w % 2 == 0;
        let inner = if squeeze { [4 * c, h / 2, w / 2] } else { shape };
        let in_ch = (c + cond.map_or(0, |cs| cs.channels)) * if squeeze { 4 } else { 1 };
        let k = kernel_for(inner[1], inner[2]);
        let mut params = ParamStore::new();
        let f = config.context_features;
        let context = [
            Conv::new(&mut params, "dq.ctx1", in_ch, f, k, Init::He, rng),
            Conv::new(&mut params, "dq.ctx2", f, f, k, Init::He, rng),
        ];
        let hid = config.hidden_channels;
        let mut layers: Vec<Box<dyn FlowLayer<T>>> = Vec::new();
        if squeeze {
            layers.push(Box::new(Squeeze::new("dq.squeeze")));
        }
        layers.push(Box::new(ContextAffine::new(&mut params, "dq.affine0", inner, f, hid, rng)?));
        if inner[0] % 2 == 0 {
            layers.push(Box::new(AffineCoupling::new(&mut params, "dq.coupling0", inner, f, hid, false, Variant::Affine, rng)?));
            layers.push(Box::new(InvConv1x1::new(&mut params, "dq.invconv", inner[0], rng)));
            layers.push(Box::new(AffineCoupling::new(&mut params, "dq.coupling1", inner, f, hid, false, Variant::Affine, rng)?));
        } else {
            layers.push(Box::new(ContextAffine::new(&mut params, "dq.affine1", inner, f, hid, rng)?));
        }
        if squeeze {
            layers.push(Box::new(Squeeze::unsqueeze("dq.unsqueeze")));
        }
        Ok(Self {
            config,
            params,
            shape,
            cond,
            squeeze,
            context,
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    fn context_for<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, x: Option<Var<'t, T>>) -> Result<Context<'t, T>> {
        let signed = y.mul_scalar(T::of(2.0))?.add_scalar(-T::one())?;
        let mut input = match (x, self.cond) {
            (Some(x), Some(_)) => y.tape().concat(&[signed, x], 1)?,
            (None, None) => signed,
            (Some(_), None) => return config_err("unconditional dequantizer was given a conditioning input"),
            (None, Some(_)) => return config_err("conditional dequantizer needs a conditioning input"),
        };
        if self.squeeze {
            input = input.space_to_depth()?;
        }
        let h = self.context[0].forward(p, input)?.relu()?;
        let h = self.context[1].forward(p, h)?.relu()?;
        Ok(Context::new(x, vec![h], Mode::Eval))
    }

    fn check_inputs(&self, y: &[usize], x: Option<&[usize]>) -> Result<()> {
        let [c, h, w] = self.shape;
        if y.len() != 4 || y[1..] != [c, h, w] {
            return config_err(format!("dequantizer expects targets [N, {}, {}, {}], got {:?}", c, h, w, y));
        }
        if let (Some(cs), Some(xs)) = (self.cond, x) {
            if xs != [y[0], cs.channels, cs.height, cs.width] {
                return config_err(format!("dequantizer conditioning shape {:?} does not match", xs));
            }
        }
        Ok(())
    }

    /// Draws `v ~ q(· | y, x)` on a tape; returns `(v, log q)`.
    pub fn sample_with<'t>(
        &self,
        p: &Bound<'t, T>,
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        rng: &mut impl Rng,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        check_binary(y)?;
        self.check_inputs(y.shape(), x.map(|x| x.shape()).as_deref())?;
        let tape = p.vars().first().map(|v| v.tape()).ok_or_else(|| FlowError::Config("empty dequantizer".into()))?;
        let yv = tape.constant(y.clone());
        let ctx = self.context_for(p, yv, x)?;
        let eps = tape.constant(randn::<T>(rng, y.shape()));
        let mut u = eps;
        let mut logdet = tape.constant(Tensor::zeros([y.shape()[0]]));
        for layer in &self.layers {
            let (next, ld) = layer.forward(p, u, &ctx)?;
            logdet = logdet.add(&ld)?;
            u = next;
        }
        let zero = tape.scalar(T::zero());
        let log_n = gaussian_log_prob(eps, zero, zero)?;
        let a = u.softplus()?.clamp_min(T::of(SOFTPLUS_FLOOR))?;
        let sign = tape.constant(y.map(|b| T::of(2.0) * b - T::one()));
        let v = a.mul(&sign)?.add_scalar(T::of(0.5))?;
        let logq = log_n.sub(&logdet)?.sub(&u.log_sigmoid()?.sum_per_item()?)?;
        if !logq.value().is_finite() {
            return Err(FlowError::NonFinite {
                layer: "dequantizer".into(),
                detail: "log q is not finite".into(),
            });
        }
        Ok((v, logq))
    }

    pub fn dequantize(&self, y: &Tensor<T>, x: Option<&Tensor<T>>, rng: &mut impl Rng) -> Result<DequantSample<T>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (v, logq) = self.sample_with(&p, y, x.map(|x| tape.constant(x.clone())), rng)?;
        let v = (*v.value()).clone();
        let logq = (*logq.value()).clone();
        Ok(DequantSample {
            v,
            logq,
            y_ref: y.clone(),
        })
    }

    /// `log q(v | y, x)` for given lifts, with `y` read off `v`.
    pub fn log_q(&self, v: &Tensor<T>, x: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = requantize_binary(v);
        self.check_inputs(v.shape(), x.map(|t| t.shape()))?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let ctx = self.context_for(&p, tape.constant(y.clone()), x.map(|x| tape.constant(x.clone())))?;
        let u = v.map(|a| T::of(softplus_inv((a.as_f64() - 0.5).abs().max(SOFTPLUS_FLOOR))));
        let uv = tape.constant(u);
        let mut eps = uv;
        let mut logdet = tape.constant(Tensor::zeros([v.shape()[0]]));
        for layer in self.layers.iter().rev() {
            let (prev, ld) = layer.inverse(&p, eps, &ctx)?;
            logdet = logdet.add(&ld)?;
            eps = prev;
        }
        let zero = tape.scalar(T::zero());
        let logq = gaussian_log_prob(eps, zero, zero)?
            .add(&logdet)?
            .sub(&uv.log_sigmoid()?.sum_per_item()?)?;
        let out = (*logq.value()).clone();
        Ok(out)
    }
}

/// Serializable description of a [`Dequantizer`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DequantSpec {
    Identity,
    Uniform {
        levels: usize,
    },
    Binary {
        #[serde(default = "default_dq_hidden")]
        hidden_channels: usize,
        #[serde(default = "default_dq_features")]
        context_features: usize,
    },
}

fn default_dq_hidden() -> usize {
    BinaryDequantConfig::default().hidden_channels
}

fn default_dq_features() -> usize {
    BinaryDequantConfig::default().context_features
}

/// How discrete targets reach the continuous flow.
pub enum Dequantizer<T: Scalar> {
    /// Continuous data modelled directly; the ELBO is `log p(y | x)`.
    Identity,
    /// Integer data in `[0, levels)`.
    Uniform { levels: usize },
    Binary(Box<BinaryDequantizer<T>>),
}

impl<T: Scalar> Dequantizer<T> {
    /// Builds the dequantizer described by `spec` for targets of `model`.
    pub fn build(spec: DequantSpec, model: &ModelConfig, rng: &mut FlowRng) -> Result<Self> {
        Ok(match spec {
            DequantSpec::Identity => Dequantizer::Identity,
            DequantSpec::Uniform { levels } => {
                if levels < 2 {
                    return config_err("uniform dequantization needs at least 2 levels");
                }
                Dequantizer::Uniform { levels }
            }
            DequantSpec::Binary {
                hidden_channels,
                context_features,
            } => Dequantizer::Binary(Box::new(BinaryDequantizer::new(
                BinaryDequantConfig {
                    hidden_channels,
                    context_features,
                },
                [model.channels, model.height, model.width],
                model.cond,
                rng,
            )?)),
        })
    }

    pub fn spec(&self) -> DequantSpec {
        match self {
            Dequantizer::Identity => DequantSpec::Identity,
            Dequantizer::Uniform { levels } => DequantSpec::Uniform { levels: *levels },
            Dequantizer::Binary(b) => DequantSpec::Binary {
                hidden_channels: b.config.hidden_channels,
                context_features: b.config.context_features,
            },
        }
    }

    pub fn params(&self) -> Option<&ParamStore<T>> {
        match self {
            Dequantizer::Identity | Dequantizer::Uniform { .. } => None,
            Dequantizer::Binary(b) => Some(&b.params),
        }
    }

    /// Trainable parameters; 0 for the fixed dequantizers.
    pub fn num_params(&self) -> usize {
        self.params().map_or(0, |p| p.num_trainable())
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore<T>> {
        match self {
            Dequantizer::Identity | Dequantizer::Uniform { .. } => None,
            Dequantizer::Binary(b) => Some(&mut b.params),
        }
    }

    /// `(scale, offset, log-volume)` of the affine map `w = v·scale + offset`
    /// from lifted data to model space, per dimension.
    fn affine(&self) -> (f64, f64, f64) {
        match self {
            Dequantizer::Identity => (1.0, 0.0, 0.0),
            Dequantizer::Uniform { levels } => {
                let l = *levels as f64;
                (1.0 / l, -0.5, -l.ln())
            }
            Dequantizer::Binary(_) => (1.0, -0.5, 0.0),
        }
    }

    /// Maps lifted values `v` into the space the flow models.
    pub fn to_model_space(&self, v: &Tensor<T>) -> Tensor<T> {
        let (s, o, _) = self.affine();
        v.map(|a| a * T::of(s) + T::of(o))
    }

    /// Maps flow samples back to discrete targets.
    pub fn quantize(&self, w: &Tensor<T>) -> Tensor<T> {
        match self {
            Dequantizer::Identity => w.clone(),
            Dequantizer::Uniform { levels } => {
                let top = T::of((*levels - 1) as f64);
                w.map(|a| ((a + T::of(0.5)) * T::of(*levels as f64)).floor().max(T::zero()).min(top))
            }
            Dequantizer::Binary(_) => w.map(|a| if a > T::zero() { T::one() } else { T::zero() }),
        }
    }

    /// Single-sample ELBO `log p(v | x) - log q(v | y, x)` per item, on a
    /// tape. `pm` and `pd` bind the model and dequantizer stores.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_with<'t>(
        &self,
        model: &FlowModel<T>,
        pm: &Bound<'t, T>,
        pd: Option<&Bound<'t, T>>,
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var<'t, T>> {
        Ok(self.elbo_with_records(model, pm, pd, y, x, mode, rng)?.0)
    }

    /// [`Dequantizer::elbo_with`] plus the statistics records produced in
    /// `Mode::Train` / `Mode::Init`, to be applied to the model store.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_with_records<'t>(
        &self,
        model: &FlowModel<T>,
        pm: &Bound<'t, T>,
        pd: Option<&Bound<'t, T>>,
        y: &Tensor<T>,
        x: Option<Var<'t, T>>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Var<'t, T>, Vec<(ParamId, Tensor<T>)>)> {
        model.validate_inputs(y.shape(), x.map(|x| x.shape()).as_deref())?;
        let tape = x.map(|x| x.tape()).or_else(|| pm.vars().first().map(|v| v.tape()));
        let tape = tape.ok_or_else(|| FlowError::Config("model has no parameters".into()))?;
        let dim = y.numel() / y.shape()[0];
        let (s, o, log_vol) = self.affine();
        let (v, logq) = match self {
            Dequantizer::Identity => (tape.constant(y.clone()), None),
            Dequantizer::Uniform { levels } => {
                let lift = uniform_dequantize(y, *levels, rng)?;
                (tape.constant(lift.v), None)
            }
            Dequantizer::Binary(b) => {
                let pd = pd.ok_or_else(|| FlowError::Config("binary dequantizer parameters not bound".into()))?;
                let (v, logq) = b.sample_with(pd, y, x, rng)?;
                (v, Some(logq))
            }
        };
        let w = v.mul_scalar(T::of(s))?.add_scalar(T::of(o))?;
        let ctx = model.context(pm, x, mode)?;
        let enc = model.encode_with(pm, w, &ctx)?;
        let mut elbo = enc.log_prob()?.add_scalar(T::of(dim as f64 * log_vol))?;
        if let Some(lq) = logq {
            elbo = elbo.sub(&lq)?;
        }
        Ok((elbo, ctx.take_records()))
    }

    /// Evaluation-mode ELBO per item.
    pub fn elbo(&self, model: &FlowModel<T>, y: &Tensor<T>, x: Option<&Tensor<T>>, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let pm = model.params.bind_frozen(&tape);
        let pd = self.params().map(|s| s.bind_frozen(&tape));
        let xv = x.map(|x| tape.constant(x.clone()));
        let e = self.elbo_with(model, &pm, pd.as_ref(), y, xv, Mode::Eval, rng)?;
        let out = (*e.value()).clone();
        Ok(out)
    }
}
