//! Seeded synthetic datasets.
//!
//! Every generator is a pure function of `(seed, index)`: item `i` is drawn
//! from its own ChaCha stream seeded with `indexed_seed(seed, i)`, so any
//! subset of items can be produced independently, in any order or in
//! parallel, with identical bits.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndtensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, FlowError, Result};
use crate::rng::{indexed_seed, rng_from};

/// What the target tensor holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Integers in `[0, levels)`.
    Integer { levels: usize },
    Binary,
    Continuous,
}

/// One `(x, y)` pair; tensors are `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub seed: u64,
    pub target: TargetKind,
}

/// Dataset selection as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    ToySr {
        #[serde(default = "default_hr")]
        hr_size: usize,
        #[serde(default = "default_factor")]
        factor: usize,
        #[serde(default = "default_bits")]
        bits: u32,
    },
    ToyVessels {
        #[serde(default = "default_vessel_size")]
        size: usize,
    },
    TwoD {
        /// When false the condition is dropped and the flow models the
        /// marginal of `y`.
        #[serde(default = "default_true")]
        conditional: bool,
    },
}

fn default_hr() -> usize {
    16
}
fn default_factor() -> usize {
    2
}
fn default_bits() -> u32 {
    5
}
fn default_vessel_size() -> usize {
    64
}
fn default_true() -> bool {
    true
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DataSpec::ToySr { hr_size, factor, bits } => {
                if factor == 0 || hr_size == 0 || hr_size % factor != 0 || hr_size % 4 != 0 {
                    return config_err(format!(
                        "data.hr_size ({}) must be a positive multiple of 4 and of data.factor ({})",
                        hr_size, factor
                    ));
                }
                if !(1..=16).contains(&bits) {
                    return config_err(format!("data.bits must be in 1..=16, got {}", bits));
                }
            }
            DataSpec::ToyVessels { size } => {
                if size == 0 || size % 4 != 0 {
                    return config_err(format!("data.size must be a positive multiple of 4, got {}", size));
                }
            }
            DataSpec::TwoD { .. } => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSpec::ToySr { .. } => "toy_sr",
            DataSpec::ToyVessels { .. } => "toy_vessels",
            DataSpec::TwoD { .. } => "two_d",
        }
    }

    pub fn target(&self) -> TargetKind {
        match *self {
            DataSpec::ToySr { bits, .. } => TargetKind::Integer { levels: 1 << bits },
            DataSpec::ToyVessels { .. } => TargetKind::Binary,
            DataSpec::TwoD { .. } => TargetKind::Continuous,
        }
    }

    /// `[C, H, W]` of the target.
    pub fn y_shape(&self) -> [usize; 3] {
        match *self {
            DataSpec::ToySr { hr_size, .. } => [1, hr_size, hr_size],
            DataSpec::ToyVessels { size } => [1, size, size],
            DataSpec::TwoD { .. } => [2, 1, 1],
        }
    }

    /// `[C, H, W]` of the conditioning input, `None` when unconditional.
    pub fn x_shape(&self) -> Option<[usize; 3]> {
        match *self {
            DataSpec::ToySr { hr_size, factor, .. } => Some([1, hr_size / factor, hr_size / factor]),
            DataSpec::ToyVessels { size } => Some([1, size, size]),
            DataSpec::TwoD { conditional } => conditional.then_some([1, 1, 1]),
        }
    }

    /// Item `index` of the dataset drawn from `seed`.
    pub fn item(&self, seed: u64, index: u64) -> PairedSample {
        match *self {
            DataSpec::ToySr { hr_size, factor, bits } => toy_sr_item(seed, index, hr_size, factor, bits),
            DataSpec::ToyVessels { size } => toy_vessels_item(seed, index, size),
            DataSpec::TwoD { .. } => two_d_item(seed, index),
        }
    }

    pub fn generate(&self, seed: u64, range: std::ops::Range<u64>) -> Vec<PairedSample> {
        range.map(|i| self.item(seed, i)).collect()
    }
}

/// Mean over non-overlapping `factor × factor` blocks of a `[C, H, W]` image.
pub fn box_downsample(y: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = match y.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return config_err(format!("box_downsample needs [C, H, W], got {:?}", s)),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return config_err(format!("{}x{} is not divisible by {}", h, w, factor));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Tensor::from_fn([c, oh, ow], |i| {
        let (ch, r) = (i / (oh * ow), i % (oh * ow));
        let (oi, oj) = (r / ow, r % ow);
        let mut acc = 0.0;
        for a in 0..factor {
            for b in 0..factor {
                acc += y.data()[(ch * h + oi * factor + a) * w + oj * factor + b];
            }
        }
        acc * inv
    }))
}

/// Super-resolution pairs: `y` is a quantised smooth random field (a few
/// oriented sinusoids plus soft edges), `x` its exact box downsample.
pub fn gen_toy_sr(seed: u64, n: usize, hr_size: usize, factor: usize, bits: u32) -> Vec<PairedSample> {
    (0..n as u64).map(|i| toy_sr_item(seed, i, hr_size, factor, bits)).collect()
}

fn toy_sr_item(seed: u64, index: u64, size: usize, factor: usize, bits: u32) -> PairedSample {
    let item_seed = indexed_seed(seed, index);
    let mut rng = rng_from(item_seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let amp = rng.random_range(0.3..1.0);
            let freq = rng.random_range(0.5..3.0);
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, freq, dir, phase)
        })
        .collect();
    let edges: Vec<(f64, f64, f64)> = (0..rng.random_range(0..=2))
        .map(|_| (rng.random_range(-1.5..1.5), rng.random_range(0.0..2.0 * PI), rng.random_range(0.2..0.8)))
        .collect();
    let field: Vec<f64> = (0..size * size)
        .map(|k| {
            let u = (k % size) as f64 / size as f64;
            let v = (k / size) as f64 / size as f64;
            let mut f = 0.0;
            for &(amp, freq, dir, phase) in &waves {
                f += amp * (2.0 * PI * freq * (dir.cos() * u + dir.sin() * v) + phase).sin();
            }
            for &(height, dir, offset) in &edges {
                let d = dir.cos() * (u - 0.5) + dir.sin() * (v - 0.5) + 0.5 - offset;
                f += height / (1.0 + (-d * size as f64).exp());
            }
            f
        })
        .collect();
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = ((1u64 << bits) - 1) as f64;
    let span = (hi - lo).max(1e-12);
    let y = Tensor::from_fn([1, size, size], |k| ((field[k] - lo) / span * top).round());
    let x = box_downsample(&y, factor).expect("size checked by caller");
    PairedSample {
        x,
        y,
        seed: item_seed,
        target: TargetKind::Integer {
            levels: 1 << bits,
        },
    }
}

/// Separable Gaussian blur of one `[H, W]` plane with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let d = t as isize - r;
                    let (ii, jj) = if horizontal { (i as isize, j as isize + d) } else { (i as isize + d, j as isize) };
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += kv * src[ii as usize * w + jj as usize];
                    }
                }
                out[i * w + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Vessel-like masks: 2–5 random cubic Bézier curves of thickness 1–3 px;
/// `x` is a blurred, noisy grey rendering of the mask.
pub fn gen_toy_vessels(seed: u64, n: usize, size: usize) -> Vec<PairedSample> {
    (0..n as u64).map(|i| toy_vessels_item(seed, i, size)).collect()
}

fn toy_vessels_item(seed: u64, index: u64, size: usize) -> PairedSample {
    let item_seed = indexed_seed(seed, index);
    let mut rng = rng_from(item_seed);
    let s = size as f64;
    let mut mask = vec![0.0; size * size];
    for _ in 0..rng.random_range(2..=5) {
        let thickness = rng.random_range(1.0..3.0);
        let half = thickness / 2.0;
        let ctrl: Vec<(f64, f64)> = (0..4)
            .map(|_| (rng.random_range(-0.1..1.1) * s, rng.random_range(-0.1..1.1) * s))
            .collect();
        let pts: Vec<(f64, f64)> = (0..=64)
            .map(|k| {
                let t = k as f64 / 64.0;
                let m = 1.0 - t;
                let b = [m * m * m, 3.0 * m * m * t, 3.0 * m * t * t, t * t * t];
                (
                    (0..4).map(|q| b[q] * ctrl[q].0).sum::<f64>(),
                    (0..4).map(|q| b[q] * ctrl[q].1).sum::<f64>(),
                )
            })
            .collect();
        for seg in pts.windows(2) {
            let ((ax, ay), (bx, by)) = (seg[0], seg[1]);
            let lo_x = (ax.min(bx) - half - 1.0).floor().max(0.0) as usize;
            let hi_x = ((ax.max(bx) + half + 1.0).ceil().max(0.0) as usize).min(size);
            let lo_y = (ay.min(by) - half - 1.0).floor().max(0.0) as usize;
            let hi_y = ((ay.max(by) + half + 1.0).ceil().max(0.0) as usize).min(size);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = (dx * dx + dy * dy).max(1e-12);
            for i in lo_y..hi_y {
                for j in lo_x..hi_x {
                    let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
                    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                    if qx * qx + qy * qy < half * half {
                        mask[i * size + j] = 1.0;
                    }
                }
            }
        }
    }
    let blurred = blur(&mask, size, size, 1.0);
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let tilt = rng.random_range(-0.1..0.1);
    let x: Vec<f64> = blurred
        .iter()
        .enumerate()
        .map(|(k, b)| 0.2 + tilt * ((k % size) as f64 / s - 0.5) + 0.7 * b + noise.sample(&mut rng))
        .collect();
    PairedSample {
        x: Tensor::new([1, size, size], x).expect("size"),
        y: Tensor::new([1, size, size], mask).expect("size"),
        seed: item_seed,
        target: TargetKind::Binary,
    }
}

/// Centre of the `x = 0` Gaussian blob.
pub const BLOB_MEAN: [f64; 2] = [0.5, -0.5];
/// Covariance of the `x = 0` Gaussian blob.
pub const BLOB_COV: [[f64; 2]; 2] = [[0.3, 0.2], [0.2, 0.4]];

fn blob_det() -> f64 {
    BLOB_COV[0][0] * BLOB_COV[1][1] - BLOB_COV[0][1] * BLOB_COV[1][0]
}

/// Differential entropy of the blob, `ln(2πe) + ½ ln det Σ` nats.
pub fn blob_entropy() -> f64 {
    (2.0 * PI * std::f64::consts::E).ln() + 0.5 * blob_det().ln()
}

/// Exact `log p(y | x = 0)`.
pub fn blob_log_density(y: [f64; 2]) -> f64 {
    let det = blob_det();
    let (a, b, d) = (BLOB_COV[0][0], BLOB_COV[0][1], BLOB_COV[1][1]);
    let (u, v) = (y[0] - BLOB_MEAN[0], y[1] - BLOB_MEAN[1]);
    let maha = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
    -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * maha
}

/// 2-D conditional toy: `x ∈ {0, 1}`; `x = 0` gives a correlated Gaussian
/// blob, `x = 1` two interleaved half-moons.
pub fn gen_2d_conditional(seed: u64, n: usize) -> Vec<PairedSample> {
    (0..n as u64).map(|i| two_d_item(seed, i)).collect()
}

fn two_d_item(seed: u64, index: u64) -> PairedSample {
    let item_seed = indexed_seed(seed, index);
    let mut rng = rng_from(item_seed);
    let cond = rng.random_bool(0.5);
    let e0: f64 = rng.sample(StandardNormal);
    let e1: f64 = rng.sample(StandardNormal);
    let y = if !cond {
        let l11 = BLOB_COV[0][0].sqrt();
        let l21 = BLOB_COV[1][0] / l11;
        let l22 = (BLOB_COV[1][1] - l21 * l21).sqrt();
        [BLOB_MEAN[0] + l11 * e0, BLOB_MEAN[1] + l21 * e0 + l22 * e1]
    } else {
        let theta = rng.random_range(0.0..PI);
        let (mx, my) = if rng.random_bool(0.5) {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        [mx - 0.5 + 0.1 * e0, my - 0.25 + 0.1 * e1]
    };
    PairedSample {
        x: Tensor::new([1, 1, 1], vec![cond as u8 as f64]).expect("shape"),
        y: Tensor::new([2, 1, 1], y.to_vec()).expect("shape"),
        seed: item_seed,
        target: TargetKind::Continuous,
    }
}

/// Geometric augmentation: rotation about the centre, isotropic scale and
/// shear, applied identically (in normalised coordinates) to `x` and `y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub scale: f64,
    pub shear: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        scale: 1.0,
        shear: 0.0,
    };

    /// Full-circle rotation, scale in `[0.8, 1.2]`, shear `~ N(0, 10°)`.
    pub fn draw(rng: &mut impl Rng) -> Self {
        let shear: f64 = rng.sample::<f64, _>(StandardNormal) * 10f64.to_radians();
        Self {
            angle: rng.random_range(0.0..2.0 * PI),
            scale: rng.random_range(0.8..1.2),
            shear,
        }
    }

    /// Output→source map: inverse of `R(angle) · S(shear) · scale`.
    fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let k = self.shear.tan();
        // A = scale · R · [[1, k], [0, 1]]
        let a = [
            [self.scale * c, self.scale * (c * k - s)],
            [self.scale * s, self.scale * (s * k + c)],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }
}

fn warp(img: &Tensor<f64>, inv: [[f64; 2]; 2]) -> Tensor<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            img.data()[(ch * h + i as usize) * w + j as usize]
        }
    };
    Tensor::from_fn([c, h, w], |k| {
        let ch = k / (h * w);
        let (i, j) = ((k / w) % h, k % w);
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
        let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
        let (fy, fx) = (sy.floor(), sx.floor());
        let (ty, tx) = (sy - fy, sx - fx);
        let (i0, j0) = (fy as isize, fx as isize);
        let top = at(ch, i0, j0) * (1.0 - tx) + if tx > 0.0 { at(ch, i0, j0 + 1) * tx } else { 0.0 };
        let bottom = if ty > 0.0 {
            (at(ch, i0 + 1, j0) * (1.0 - tx) + if tx > 0.0 { at(ch, i0 + 1, j0 + 1) * tx } else { 0.0 }) * ty
        } else {
            0.0
        };
        top * (1.0 - ty) + bottom
    })
}

fn requantise(t: &Tensor<f64>, kind: TargetKind) -> Tensor<f64> {
    match kind {
        TargetKind::Binary => t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        TargetKind::Integer { levels } => t.map(|v| v.round().clamp(0.0, (levels - 1) as f64)),
        TargetKind::Continuous => t.clone(),
    }
}

/// Applies a random augmentation drawn from `seed`.
pub fn augment(sample: &PairedSample, seed: u64) -> Result<PairedSample> {
    augment_with(sample, AugmentParams::draw(&mut rng_from(seed)))
}

pub fn augment_with(sample: &PairedSample, params: AugmentParams) -> Result<PairedSample> {
    let image = |t: &Tensor<f64>| t.rank() == 3 && t.shape()[1] * t.shape()[2] > 1;
    if !image(&sample.y) || !image(&sample.x) {
        return Err(FlowError::Config("augmentation needs image-shaped samples".into()));
    }
    let inv = params.inverse_matrix();
    Ok(PairedSample {
        x: warp(&sample.x, inv),
        y: requantise(&warp(&sample.y, inv), sample.target),
        seed: sample.seed,
        target: sample.target,
    })
}

/// Stacks `[C, H, W]` items into `[N, C, H, W]` batches of `x` and `y`.
pub fn batch(samples: &[&PairedSample]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let xs: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.x).collect();
    let ys: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.y).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

const DATA_MAGIC: &[u8] = b"CONDFLOW-DATA 1\n";

#[derive(Debug, Serialize, Deserialize)]
struct DataHeader {
    generator: String,
    seed: u64,
    count: usize,
    x_shape: Vec<usize>,
    y_shape: Vec<usize>,
    target: TargetKind,
}

/// Writes samples to the dataset container.
///
/// Layout: the line `CONDFLOW-DATA 1`, a little-endian `u64` header
/// length, a TOML header (generator, seed, count, shapes, target kind),
/// then per sample the item seed (`u64`), `x` and `y` as little-endian
/// `f64` in row-major order.
pub fn write_container(out: &mut impl Write, generator: &str, seed: u64, samples: &[PairedSample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| FlowError::Format("no samples to write".into()))?;
    let header = DataHeader {
        generator: generator.into(),
        seed,
        count: samples.len(),
        x_shape: first.x.shape().to_vec(),
        y_shape: first.y.shape().to_vec(),
        target: first.target,
    };
    let text = toml::to_string(&header).map_err(|e| FlowError::Format(e.to_string()))?;
    out.write_all(DATA_MAGIC)?;
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    for s in samples {
        if s.x.shape() != first.x.shape() || s.y.shape() != first.y.shape() {
            return Err(FlowError::Format("samples differ in shape".into()));
        }
        out.write_all(&s.seed.to_le_bytes())?;
        for v in s.x.data().iter().chain(s.y.data()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a container written by [`write_container`]; returns the generator
/// name, master seed and samples.
pub fn read_container(input: &mut impl Read) -> Result<(String, u64, Vec<PairedSample>)> {
    let mut magic = vec![0u8; DATA_MAGIC.len()];
    input.read_exact(&mut magic)?;
    if magic != DATA_MAGIC {
        return Err(FlowError::Format("not a dataset container".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut text = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|e| FlowError::Format(e.to_string()))?;
    let header: DataHeader = toml::from_str(&text).map_err(|e| FlowError::Format(e.to_string()))?;
    let (nx, ny) = (header.x_shape.iter().product::<usize>(), header.y_shape.iter().product::<usize>());
    let mut samples = Vec::with_capacity(header.count);
    let mut word = [0u8; 8];
    for _ in 0..header.count {
        input.read_exact(&mut word)?;
        let seed = u64::from_le_bytes(word);
        let mut values = Vec::with_capacity(nx + ny);
        for _ in 0..nx + ny {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        let y = values.split_off(nx);
        samples.push(PairedSample {
            x: Tensor::new(header.x_shape.clone(), values)?,
            y: Tensor::new(header.y_shape.clone(), y)?,
            seed,
            target: header.target,
        });
    }
    Ok((header.generator, header.seed, samples))
}
