use ndtensor::{linalg, Scalar, Tensor, Var};
use rand::Rng;

use super::{checked, per_item, zeros_per_item, Context, FlowLayer, Mode, Variant};
use crate::error::{config_err, FlowError, Result};
use crate::nn::{kernel_for, TwoLayerNet};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::randn;

/// Scale bound: `log s = ALPHA · tanh(raw)`.
const ALPHA: f64 = 2.0;
const SINGULAR_TOL: f64 = 1e-12;
const STATS_MOMENTUM: f64 = 0.1;
const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation of an `[N, C, H, W]` tensor,
/// pooled over the batch (`[1, C, 1, 1]`) or per item (`[N, C, 1, 1]`).
fn channel_stats<T: Scalar>(x: &Tensor<T>, per_item: bool) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let groups = if per_item { n } else { 1 };
    let mut mean = vec![0.0; groups * c];
    let mut sq = vec![0.0; groups * c];
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let g = if per_item { i * c + ch } else { ch };
            for v in &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                let v = v.as_f64();
                mean[g] += v;
                sq[g] += v * v;
            }
        }
    }
    let count = (plane * if per_item { 1 } else { n }) as f64;
    let mut std = vec![0.0; groups * c];
    for g in 0..groups * c {
        mean[g] /= count;
        let var = (sq[g] / count - mean[g] * mean[g]).max(0.0);
        std[g] = var.sqrt().max(STD_FLOOR);
    }
    let shape = [groups, c, 1, 1];
    Ok((Tensor::from_f64(shape, &mean)?, Tensor::from_f64(shape, &std)?))
}

fn spatial<T: Scalar>(v: &Var<'_, T>) -> Result<(usize, usize, usize, usize)> {
    Ok(v.value().dims4()?)
}

/// Per-channel affine `z = scale · (y + bias)` with data-dependent
/// initialisation.
#[derive(Clone, Debug)]
pub struct ActNorm {
    name: String,
    pub scale: ParamId,
    pub bias: ParamId,
}

impl ActNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            scale: store.add(&format!("{}.scale", name), Tensor::ones([1, channels, 1, 1])),
            bias: store.add(&format!("{}.bias", name), Tensor::zeros([1, channels, 1, 1])),
        }
    }

    fn params<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        y: Var<'t, T>,
        init: Option<&Context<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = y.tape();
        if let Some(ctx) = init {
            let (mean, std) = channel_stats(&y.value(), false)?;
            let scale = std.map(|s| T::one() / s);
            let bias = mean.map(|m| -m);
            ctx.record(self.scale, scale.clone());
            ctx.record(self.bias, bias.clone());
            return Ok((tape.constant(scale), tape.constant(bias)));
        }
        let scale = p[self.scale];
        if scale.value().data().iter().any(|s| *s == T::zero()) {
            return Err(FlowError::Singular {
                layer: self.name.clone(),
                detail: "zero scale".into(),
            });
        }
        Ok((scale, p[self.bias]))
    }

    fn logdet<'t, T: Scalar>(scale: Var<'t, T>, n: usize, hw: usize) -> Result<Var<'t, T>> {
        per_item(scale.abs()?.log()?.sum()?.mul_scalar(T::of(hw as f64))?, n)
    }
}

impl<T: Scalar> FlowLayer<T> for ActNorm {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (n, _, h, w) = spatial(&y)?;
            let init = (ctx.mode == Mode::Init).then_some(ctx);
            let (scale, bias) = self.params(p, y, init)?;
            let z = y.add(&bias)?.mul(&scale)?;
            Ok((z, Self::logdet(scale, n, h * w)?))
        })())
    }

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (n, _, h, w) = spatial(&z)?;
            let (scale, bias) = self.params(p, z, None)?;
            let y = z.div(&scale)?.sub(&bias)?;
            Ok((y, Self::logdet(scale, n, h * w)?.neg()?))
        })())
    }
}

/// Instance normalisation used as a flow layer.
///
/// In `Train`/`Init` mode each sample is normalised with its own per-channel
/// mean and deviation, which enter the log-determinant as constants; the
/// batch average is folded into running buffers. `Eval` mode and every
/// inverse use the running buffers, so the layer is an exact affine
/// bijection there. Forward-in-train followed by inverse is therefore not
/// an identity.
#[derive(Clone, Debug)]
pub struct InstanceNormFlow {
    name: String,
    pub running_mean: ParamId,
    pub running_std: ParamId,
}

impl InstanceNormFlow {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            running_mean: store.add_buffer(&format!("{}.running_mean", name), Tensor::zeros([1, channels, 1, 1])),
            running_std: store.add_buffer(&format!("{}.running_std", name), Tensor::ones([1, channels, 1, 1])),
        }
    }

    fn running<'t, T: Scalar>(&self, p: &Bound<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let std = p[self.running_std];
        if std.value().data().iter().any(|s| *s <= T::zero()) {
            return Err(FlowError::Singular {
                layer: self.name.clone(),
                detail: "non-positive running deviation".into(),
            });
        }
        Ok((p[self.running_mean], std))
    }
}

impl<T: Scalar> FlowLayer<T> for InstanceNormFlow {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (n, c, h, w) = spatial(&y)?;
            let hw = T::of((h * w) as f64);
            let tape = y.tape();
            if ctx.mode == Mode::Eval {
                let (mean, std) = self.running(p)?;
                let z = y.sub(&mean)?.div(&std)?;
                let ld = per_item(std.log()?.sum()?.mul_scalar(-hw)?, n)?;
                return Ok((z, ld));
            }
            let (mean, std) = channel_stats(&y.value(), true)?;
            let ld = Tensor::from_fn([n], |i| -hw * std.data()[i * c..(i + 1) * c].iter().map(|s| s.ln()).sum::<T>());
            let batch_mean = Tensor::from_fn([1, c, 1, 1], |ch| (0..n).map(|i| mean.data()[i * c + ch]).sum::<T>() / T::of(n as f64));
            let batch_std = Tensor::from_fn([1, c, 1, 1], |ch| (0..n).map(|i| std.data()[i * c + ch]).sum::<T>() / T::of(n as f64));
            if ctx.mode == Mode::Init {
                ctx.record(self.running_mean, batch_mean);
                ctx.record(self.running_std, batch_std);
            } else {
                let m = T::of(STATS_MOMENTUM);
                let blend = |old: &Tensor<T>, new: &Tensor<T>| old.zip_map(new, |o, b| (T::one() - m) * o + m * b);
                ctx.record(self.running_mean, blend(&p[self.running_mean].value(), &batch_mean)?);
                ctx.record(self.running_std, blend(&p[self.running_std].value(), &batch_std)?);
            }
            let z = y.sub(&tape.constant(mean))?.div(&tape.constant(std))?;
            Ok((z, tape.constant(ld)))
        })())
    }

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (n, _, h, w) = spatial(&z)?;
            let (mean, std) = self.running(p)?;
            let y = z.mul(&std)?.add(&mean)?;
            let ld = per_item(std.log()?.sum()?.mul_scalar(T::of((h * w) as f64))?, n)?;
            Ok((y, ld))
        })())
    }
}

/// Invertible 1×1 convolution: a learned channel-mixing matrix applied at
/// every pixel.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    name: String,
    pub weight: ParamId,
    channels: usize,
}

impl InvConv1x1 {
    /// Random orthogonal initialisation (`log|det W| = 0`).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let w = linalg::orthonormalize(&randn::<f64>(rng, &[channels, channels]))
            .unwrap_or_else(|_| Tensor::identity(channels))
            .cast::<T>();
        Self::with_weight(store, name, w)
    }

    pub fn with_weight<T: Scalar>(store: &mut ParamStore<T>, name: &str, weight: Tensor<T>) -> Self {
        let channels = weight.shape()[0];
        Self {
            name: name.to_string(),
            weight: store.add(&format!("{}.weight", name), weight),
            channels,
        }
    }

    fn check<T: Scalar>(&self, w: &Tensor<T>) -> Result<()> {
        let det = linalg::det(w)?;
        if !(det.as_f64().abs() >= SINGULAR_TOL) {
            return Err(FlowError::Singular {
                layer: self.name.clone(),
                detail: format!("|det W| = {:e}", det.as_f64().abs()),
            });
        }
        Ok(())
    }

    fn apply<'t, T: Scalar>(&self, x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = self.channels;
        Ok(x.conv2d(&w.reshape([c, c, 1, 1])?, (0, 0), (1, 1))?)
    }
}

impl<T: Scalar> FlowLayer<T> for InvConv1x1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let w = p[self.weight];
        self.check(&w.value())?;
        checked(&self.name, (|| {
            let (n, _, h, wd) = spatial(&y)?;
            let z = self.apply(y, w)?;
            Ok((z, per_item(w.log_abs_det()?.mul_scalar(T::of((h * wd) as f64))?, n)?))
        })())
    }

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let w = p[self.weight];
        self.check(&w.value())?;
        checked(&self.name, (|| {
            let (n, _, h, wd) = spatial(&z)?;
            let y = self.apply(z, w.inverse(SINGULAR_TOL)?)?;
            Ok((y, per_item(w.log_abs_det()?.mul_scalar(T::of(-((h * wd) as f64)))?, n)?))
        })())
    }
}

/// Space-to-depth: each 2×2 block becomes 4 channels ordered top-left,
/// top-right, bottom-left, bottom-right. `reverse` swaps the directions.
#[derive(Clone, Debug)]
pub struct Squeeze {
    name: String,
    reverse: bool,
}

impl Squeeze {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            reverse: false,
        }
    }

    pub fn unsqueeze(name: &str) -> Self {
        Self {
            name: name.to_string(),
            reverse: true,
        }
    }
}

impl<T: Scalar> FlowLayer<T> for Squeeze {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, _p: &Bound<'t, T>, y: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let z = if self.reverse { y.depth_to_space()? } else { y.space_to_depth()? };
            Ok((z, zeros_per_item(y)))
        })())
    }

    fn inverse<'t>(&self, _p: &Bound<'t, T>, z: Var<'t, T>, _ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let y = if self.reverse { z.space_to_depth()? } else { z.depth_to_space()? };
            Ok((y, zeros_per_item(z)))
        })())
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        if self.reverse {
            [c / 4, h * 2, w * 2]
        } else {
            [c * 4, h / 2, w / 2]
        }
    }
}

/// `z0 = (y0 - t) · exp(-log_s)` with its per-item log-determinant
/// `-Σ log_s`.
pub fn affine_couple<'t, T: Scalar>(y0: Var<'t, T>, t: Var<'t, T>, log_s: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let z0 = y0.sub(&t)?.mul(&log_s.neg()?.exp()?)?;
    Ok((z0, log_s.sum_per_item()?.neg()?))
}

fn affine_uncouple<'t, T: Scalar>(z0: Var<'t, T>, t: Var<'t, T>, log_s: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let y0 = z0.mul(&log_s.exp()?)?.add(&t)?;
    Ok((y0, log_s.sum_per_item()?))
}

fn bounded_log_scale<'t, T: Scalar>(raw: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(raw.tanh()?.mul_scalar(T::of(ALPHA))?)
}

/// Coupling layer: the first half of the channels is transformed as a
/// function of the second half and the conditioning features.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    name: String,
    net: TwoLayerNet,
    half: usize,
    variant: Variant,
}

impl AffineCoupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        [channels, height, width]: [usize; 3],
        cond_channels: usize,
        hidden: usize,
        instance_norm: bool,
        variant: Variant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return config_err(format!("coupling layer `{}` needs an even channel count, got {}", name, channels));
        }
        let half = channels / 2;
        let out = match variant {
            Variant::Affine => 2 * half,
            Variant::VolumePreserving => half,
        };
        let net = TwoLayerNet::new(
            store,
            &format!("{}.net", name),
            half + cond_channels,
            hidden,
            out,
            kernel_for(height, width),
            instance_norm,
            rng,
        );
        Ok(Self {
            name: name.to_string(),
            net,
            half,
            variant,
        })
    }

    /// `(t, log_s)`; `log_s` is `None` for the volume-preserving variant.
    fn shift_scale<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        keep: Var<'t, T>,
        ctx: &Context<'t, T>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let (_, _, h, w) = spatial(&keep)?;
        let input = match ctx.feature(h, w)? {
            Some(f) => keep.tape().concat(&[keep, f], 1)?,
            None => keep,
        };
        let out = self.net.forward(p, input)?;
        Ok(match self.variant {
            Variant::Affine => (
                out.narrow(1, self.half, self.half)?,
                Some(bounded_log_scale(out.narrow(1, 0, self.half)?)?),
            ),
            Variant::VolumePreserving => (out, None),
        })
    }
}

impl<T: Scalar> FlowLayer<T> for AffineCoupling {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let y0 = y.narrow(1, 0, self.half)?;
            let y1 = y.narrow(1, self.half, self.half)?;
            let (t, log_s) = self.shift_scale(p, y1, ctx)?;
            let (z0, ld) = match log_s {
                Some(ls) => affine_couple(y0, t, ls)?,
                None => (y0.sub(&t)?, zeros_per_item(y)),
            };
            Ok((y.tape().concat(&[z0, y1], 1)?, ld))
        })())
    }

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let z0 = z.narrow(1, 0, self.half)?;
            let z1 = z.narrow(1, self.half, self.half)?;
            let (t, log_s) = self.shift_scale(p, z1, ctx)?;
            let (y0, ld) = match log_s {
                Some(ls) => affine_uncouple(z0, t, ls)?,
                None => (z0.add(&t)?, zeros_per_item(z)),
            };
            Ok((z.tape().concat(&[y0, z1], 1)?, ld))
        })())
    }
}

/// Elementwise affine map whose shift and scale depend only on the
/// conditioning features. Works for any channel count, including 1.
#[derive(Clone, Debug)]
pub struct ContextAffine {
    name: String,
    net: TwoLayerNet,
    channels: usize,
}

impl ContextAffine {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        [channels, height, width]: [usize; 3],
        cond_channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cond_channels == 0 {
            return config_err(format!("context affine layer `{}` needs conditioning features", name));
        }
        let net = TwoLayerNet::new(
            store,
            &format!("{}.net", name),
            cond_channels,
            hidden,
            2 * channels,
            kernel_for(height, width),
            false,
            rng,
        );
        Ok(Self {
            name: name.to_string(),
            net,
            channels,
        })
    }

    fn shift_scale<'t, T: Scalar>(&self, p: &Bound<'t, T>, like: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (_, _, h, w) = spatial(&like)?;
        let f = ctx
            .feature(h, w)?
            .ok_or_else(|| FlowError::Config(format!("layer `{}` got an unconditional context", self.name)))?;
        let out = self.net.forward(p, f)?;
        let c = self.channels;
        Ok((out.narrow(1, c, c)?, bounded_log_scale(out.narrow(1, 0, c)?)?))
    }
}

impl<T: Scalar> FlowLayer<T> for ContextAffine {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (t, ls) = self.shift_scale(p, y, ctx)?;
            affine_couple(y, t, ls)
        })())
    }

    fn inverse<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        checked(&self.name, (|| {
            let (t, ls) = self.shift_scale(p, z, ctx)?;
            affine_uncouple(z, t, ls)
        })())
    }
}
