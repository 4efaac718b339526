//! Evaluation quantities: bits per dimension, PSNR, SSIM, precision/recall
//! and F-scores, and the distance induced by a volume-preserving flow.

use std::f64::consts::LN_2;

use ndtensor::Tensor;
use rand::Rng;

use crate::error::{config_err, Result};
use crate::flow::FlowModel;
use crate::rng::randn;

/// `nll / (D ln 2)`.
pub fn bits_per_dim(nll_nats: f64, dims: usize) -> f64 {
    nll_nats / (dims as f64 * LN_2)
}

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return config_err(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * max_val.log10() - 10.0 * mse.log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean structural similarity over all valid 11×11 Gaussian windows
/// (σ = 1.5, K1 = 0.01, K2 = 0.03). The last two axes are the image plane;
/// leading axes are averaged over. `data_range` is the dynamic range of
/// the pixel values (e.g. `2^bits − 1`).
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let r = a.rank();
    if r < 2 {
        return config_err("ssim needs at least two dimensions");
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return config_err(format!("ssim needs images of at least {0}x{0}, got {1}x{2}", SSIM_WINDOW, h, w));
    }
    let half = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let planes = a.numel() / (h * w);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, gi) in g1.iter().enumerate() {
                    for (dj, gj) in g1.iter().enumerate() {
                        let g = gi * gj;
                        let (x, y) = (pa[(i + di) * w + j + dj], pb[(i + di) * w + j + dj]);
                        ma += g * x;
                        mb += g * y;
                        saa += g * x * x;
                        sbb += g * y * y;
                        sab += g * (x * y);
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (planes * oh * ow) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

impl PrPoint {
    /// `2PR / (P + R)`, zero when both vanish.
    pub fn f_score(&self) -> f64 {
        let s = self.precision + self.recall;
        if s > 0.0 {
            2.0 * self.precision * self.recall / s
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Counts summed over every pixel of every image.
    Micro,
    /// Precision and recall averaged over images.
    Macro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Point of maximal F-score; `None` when recall is undefined.
    pub best: Option<PrPoint>,
    /// Set when the ground truth has no positives (for macro pooling: any
    /// image has none), so recall is undefined.
    pub recall_undefined: bool,
}

#[derive(Clone, Copy, Default)]
struct Counts {
    tp: f64,
    fp: f64,
    positives: f64,
}

impl Counts {
    fn of(pred: impl Iterator<Item = bool>, gt: &[f64]) -> Self {
        let mut c = Counts::default();
        for (p, &g) in pred.zip(gt) {
            let g = g >= 0.5;
            c.positives += g as u8 as f64;
            if p {
                if g {
                    c.tp += 1.0;
                } else {
                    c.fp += 1.0;
                }
            }
        }
        c
    }

    /// Precision is taken as 1 when nothing is predicted positive.
    fn precision(&self) -> f64 {
        if self.tp + self.fp > 0.0 {
            self.tp / (self.tp + self.fp)
        } else {
            1.0
        }
    }

    fn recall(&self) -> f64 {
        if self.positives > 0.0 {
            self.tp / self.positives
        } else {
            f64::NAN
        }
    }
}

/// `n` thresholds evenly spaced on `[0, 1]`, ascending.
pub fn thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// Precision and recall of `soft >= t` against binary `gt` for every
/// threshold `t`. `soft` and `gt` are lists of images of equal shapes.
pub fn pr_curve(soft: &[Tensor<f64>], gt: &[Tensor<f64>], thresholds: &[f64], pooling: Pooling) -> Result<PrCurve> {
    if soft.len() != gt.len() || soft.is_empty() {
        return config_err(format!("pr_curve needs matching non-empty image lists ({} vs {})", soft.len(), gt.len()));
    }
    for (s, g) in soft.iter().zip(gt) {
        same_shape(s, g)?;
    }
    let mut points = Vec::with_capacity(thresholds.len());
    let mut undefined = false;
    for &t in thresholds {
        let per_image: Vec<Counts> = soft
            .iter()
            .zip(gt)
            .map(|(s, g)| Counts::of(s.data().iter().map(|&v| v >= t), g.data()))
            .collect();
        let (precision, recall) = match pooling {
            Pooling::Micro => {
                let c = per_image.iter().fold(Counts::default(), |a, c| Counts {
                    tp: a.tp + c.tp,
                    fp: a.fp + c.fp,
                    positives: a.positives + c.positives,
                });
                (c.precision(), c.recall())
            }
            Pooling::Macro => {
                let k = per_image.len() as f64;
                (
                    per_image.iter().map(Counts::precision).sum::<f64>() / k,
                    per_image.iter().map(Counts::recall).sum::<f64>() / k,
                )
            }
        };
        undefined |= recall.is_nan();
        points.push(PrPoint {
            precision,
            recall,
            threshold: t,
        });
    }
    let best = if undefined {
        None
    } else {
        points.iter().copied().fold(None, |best: Option<PrPoint>, p| match best {
            Some(b) if b.f_score() >= p.f_score() => Some(b),
            _ => Some(p),
        })
    };
    Ok(PrCurve {
        points,
        best,
        recall_undefined: undefined,
    })
}

/// One PR point per binary sample against the ground truth.
pub fn pr_scatter<'a>(samples: impl IntoIterator<Item = &'a Tensor<f64>>, gt: &Tensor<f64>) -> Result<Vec<PrPoint>> {
    samples
        .into_iter()
        .map(|s| {
            same_shape(s, gt)?;
            let c = Counts::of(s.data().iter().map(|&v| v >= 0.5), gt.data());
            Ok(PrPoint {
                precision: c.precision(),
                recall: c.recall(),
                threshold: 0.5,
            })
        })
        .collect()
}

/// Distance `‖f(y) − f(ŷ)‖₂` through a volume-preserving flow, with `f`
/// the concatenation of every latent part. The density normaliser of the
/// underlying Gaussian form is dropped; it does not affect the axioms.
pub struct FlowMetric<'m> {
    flow: &'m FlowModel<f64>,
    x: Option<Tensor<f64>>,
}

impl<'m> FlowMetric<'m> {
    /// `x` is one conditioning input (`[C, H, W]`) for conditional flows.
    pub fn new(flow: &'m FlowModel<f64>, x: Option<Tensor<f64>>) -> Result<Self> {
        flow.check_volume_preserving(1e-9)?;
        if flow.is_conditional() != x.is_some() {
            return config_err("flow metric: conditioning input must be given exactly for conditional flows");
        }
        Ok(Self { flow, x })
    }

    /// Flattened embeddings of a batch `[N, C, H, W]`, one row per item.
    pub fn embed(&self, y: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let n = y.shape()[0];
        let x = match &self.x {
            Some(x) => {
                let parts: Vec<&Tensor<f64>> = std::iter::repeat_n(x, n).collect();
                Some(Tensor::stack(&parts)?)
            }
            None => None,
        };
        let (latents, _, _) = self.flow.encode(y, x.as_ref())?;
        Ok((0..n)
            .map(|i| {
                latents
                    .iter()
                    .flat_map(|z| {
                        let per = z.numel() / n;
                        z.data()[i * per..(i + 1) * per].iter().copied()
                    })
                    .collect()
            })
            .collect())
    }

    /// Distance between two single items (any shape holding one item).
    pub fn distance(&self, y: &Tensor<f64>, y_hat: &Tensor<f64>) -> Result<f64> {
        let c = &self.flow.config;
        let item = [1, c.channels, c.height, c.width];
        let both = Tensor::concat(&[&y.reshape(item)?, &y_hat.reshape(item)?], 0)?;
        let e = self.embed(&both)?;
        Ok(l2(&e[0], &e[1]))
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AxiomReport {
    pub triples: usize,
    pub negative: usize,
    pub identity: usize,
    pub asymmetric: usize,
    pub triangle: usize,
    pub max_triangle_excess: f64,
}

impl AxiomReport {
    pub fn violations(&self) -> usize {
        self.negative + self.identity + self.asymmetric + self.triangle
    }
}

/// Slack allowed for the identity and triangle checks.
pub const AXIOM_TOL: f64 = 1e-9;

/// Draws `n_triples` standard-normal triples and checks non-negativity,
/// identity of indiscernibles, exact symmetry and the triangle inequality.
pub fn metric_axiom_check(fm: &FlowMetric<'_>, n_triples: usize, rng: &mut impl Rng) -> Result<AxiomReport> {
    let c = &fm.flow.config;
    let item = [c.channels, c.height, c.width];
    let mut report = AxiomReport {
        triples: n_triples,
        ..AxiomReport::default()
    };
    let chunk = 512;
    let mut done = 0;
    while done < n_triples {
        let k = chunk.min(n_triples - done);
        let pts = randn::<f64>(rng, &[3 * k, item[0], item[1], item[2]]);
        let e = fm.embed(&pts)?;
        let d = pts.numel() / (3 * k);
        for t in 0..k {
            let (a, b, cc) = (&e[3 * t], &e[3 * t + 1], &e[3 * t + 2]);
            let raw = |i: usize| &pts.data()[(3 * t + i) * d..(3 * t + i + 1) * d];
            let (ab, ba, bc, ac) = (l2(a, b), l2(b, a), l2(b, cc), l2(a, cc));
            if ab < 0.0 || bc < 0.0 || ac < 0.0 {
                report.negative += 1;
            }
            if l2(a, a) != 0.0 || ((ab < AXIOM_TOL) != (raw(0) == raw(1))) {
                report.identity += 1;
            }
            if ab != ba {
                report.asymmetric += 1;
            }
            let excess = ac - (ab + bc);
            report.max_triangle_excess = report.max_triangle_excess.max(excess);
            if excess > AXIOM_TOL {
                report.triangle += 1;
            }
        }
        done += k;
    }
    Ok(report)
}
