use ndtensor::{Scalar, Tensor, Var};
use rand::Rng;

use super::Context;
use crate::error::{config_err, Result};
use crate::nn::{kernel_for, Conv, Init};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::randn;

/// `Σ log N(z; μ, exp(log_sigma)²)` per batch item.
pub fn gaussian_log_prob<'t, T: Scalar>(z: Var<'t, T>, mu: Var<'t, T>, log_sigma: Var<'t, T>) -> Result<Var<'t, T>> {
    let half_log_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let eps = z.sub(&mu)?.mul(&log_sigma.neg()?.exp()?)?;
    let per_dim = eps.square()?.mul_scalar(T::of(-0.5))?.sub(&log_sigma)?.add_scalar(-half_log_2pi)?;
    Ok(per_dim.sum_per_item()?)
}

/// Draws `μ + τ·σ·ε` with `ε ~ N(0, I)`; `τ = 0` returns `μ` exactly.
fn draw<'t, T: Scalar>(mu: Var<'t, T>, log_sigma: Var<'t, T>, tau: f64, rng: &mut impl Rng) -> Result<Var<'t, T>> {
    if tau == 0.0 {
        return Ok(mu);
    }
    let eps = mu.tape().constant(randn::<T>(rng, &mu.shape()));
    Ok(mu.add(&log_sigma.exp()?.mul(&eps)?.mul_scalar(T::of(tau))?)?)
}

/// Factors out the second half of the channels and scores it under a
/// Gaussian whose parameters come from the first half (and the conditioning
/// features, when present).
#[derive(Clone, Debug)]
pub struct SplitPrior {
    name: String,
    conv: Conv,
    keep: usize,
}

impl SplitPrior {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        [channels, height, width]: [usize; 3],
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return config_err(format!("split `{}` needs an even channel count, got {}", name, channels));
        }
        let keep = channels / 2;
        let conv = Conv::new(
            store,
            &format!("{}.conv", name),
            keep + cond_channels,
            2 * (channels - keep),
            kernel_for(height, width),
            Init::Zeros,
            rng,
        );
        Ok(Self {
            name: name.to_string(),
            conv,
            keep,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kept_channels(&self) -> usize {
        self.keep
    }

    fn gaussian<'t, T: Scalar>(&self, p: &Bound<'t, T>, z0: Var<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = z0.shape();
        let input = match ctx.feature(s[2], s[3])? {
            Some(f) => z0.tape().concat(&[z0, f], 1)?,
            None => z0,
        };
        let out = self.conv.forward(p, input)?;
        let c = out.shape()[1] / 2;
        Ok((out.narrow(1, 0, c)?, out.narrow(1, c, c)?))
    }

    /// `(z0, z1, log p(z1 | z0, h))`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
        ctx: &Context<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let c = z.shape()[1];
        let z0 = z.narrow(1, 0, self.keep)?;
        let z1 = z.narrow(1, self.keep, c - self.keep)?;
        let (mu, ls) = self.gaussian(p, z0, ctx)?;
        let lp = gaussian_log_prob(z1, mu, ls).map_err(|e| e.in_layer(&self.name))?;
        Ok((z0, z1, lp))
    }

    /// Rejoins `z0` with a given `z1`.
    pub fn inverse<'t, T: Scalar>(&self, z0: Var<'t, T>, z1: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(z0.tape().concat(&[z0, z1], 1)?)
    }

    /// Rejoins `z0` with `z1 ~ N(μ, τ²σ²)`; returns the drawn `z1` too.
    pub fn sample<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        z0: Var<'t, T>,
        ctx: &Context<'t, T>,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (mu, ls) = self.gaussian(p, z0, ctx)?;
        let z1 = draw(mu, ls, tau, rng)?;
        Ok((self.inverse(z0, z1)?, z1))
    }
}

#[derive(Clone, Debug)]
enum PriorKind {
    /// μ and log σ from a zero-initialised conv over the features.
    Conditional(Conv),
    /// Free per-dimension parameters.
    Free { mu: ParamId, log_sigma: ParamId },
}

/// Diagonal Gaussian over the final latent.
#[derive(Clone, Debug)]
pub struct Prior {
    kind: PriorKind,
    shape: [usize; 3],
}

impl Prior {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 3],
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [c, h, w] = shape;
        let kind = if cond_channels > 0 {
            PriorKind::Conditional(Conv::new(store, &format!("{}.conv", name), cond_channels, 2 * c, kernel_for(h, w), Init::Zeros, rng))
        } else {
            PriorKind::Free {
                mu: store.add(&format!("{}.mu", name), Tensor::zeros([1, c, h, w])),
                log_sigma: store.add(&format!("{}.log_sigma", name), Tensor::zeros([1, c, h, w])),
            }
        };
        Self { kind, shape }
    }

    /// `(μ, log σ)`, each broadcastable to `[N, C, H, W]`.
    pub fn params<'t, T: Scalar>(&self, p: &Bound<'t, T>, ctx: &Context<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let [c, h, w] = self.shape;
        match &self.kind {
            PriorKind::Free { mu, log_sigma } => Ok((p[*mu], p[*log_sigma])),
            PriorKind::Conditional(conv) => {
                let f = ctx
                    .feature(h, w)?
                    .ok_or_else(|| crate::error::FlowError::Config("conditional prior without conditioning input".into()))?;
                let out = conv.forward(p, f)?;
                Ok((out.narrow(1, 0, c)?, out.narrow(1, c, c)?))
            }
        }
    }

    pub fn log_prob<'t, T: Scalar>(&self, p: &Bound<'t, T>, z: Var<'t, T>, ctx: &Context<'t, T>) -> Result<Var<'t, T>> {
        let (mu, ls) = self.params(p, ctx)?;
        let n = z.shape()[0];
        let full = z.tape().constant(Tensor::zeros([n, self.shape[0], self.shape[1], self.shape[2]]));
        gaussian_log_prob(z, mu.add(&full)?, ls.add(&full)?).map_err(|e| e.in_layer("prior"))
    }

    pub fn sample<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        ctx: &Context<'t, T>,
        n: usize,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Var<'t, T>> {
        let (mu, ls) = self.params(p, ctx)?;
        let [c, h, w] = self.shape;
        let full = mu.tape().constant(Tensor::zeros([n, c, h, w]));
        draw(mu.add(&full)?, ls.add(&full)?, tau, rng)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
}
