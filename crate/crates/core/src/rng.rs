//! Seed discipline.
//!
//! One master seed fans out into independent per-subsystem streams with
//! SplitMix64: `stream_seed(master, Stream::Data)` and so on. Generators
//! derive per-item seeds with `indexed_seed(seed, index)`, so item `i` never
//! depends on how many items were drawn before it. All streams feed
//! `ChaCha8Rng`.

use ndtensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type FlowRng = ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dequant = 3,
    Sampling = 4,
    Eval = 5,
    Augment = 6,
    Batches = 7,
}

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ splitmix64(stream as u64))
}

pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(index ^ 0xA5A5_A5A5_A5A5_A5A5)))
}

pub fn rng_from(seed: u64) -> FlowRng {
    FlowRng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream) -> FlowRng {
    rng_from(stream_seed(master, stream))
}

pub fn randn<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random::<f64>()))
}
