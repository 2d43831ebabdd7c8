//! Seeded randomness. Every stochastic routine takes `&mut Rng` explicitly;
//! nothing in the crate touches thread-local or OS entropy.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// Stream ids for [`substream`], one per pipeline stage.
pub const STREAM_DATASET: u64 = 1;
pub const STREAM_BACKBONE: u64 = 2;
pub const STREAM_AAM: u64 = 3;
pub const STREAM_CVAE: u64 = 4;
pub const STREAM_CLASSIFIER: u64 = 5;

/// Root generator for a run.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream of a base seed. Stages of the pipeline each draw
/// from their own stream so that skipping one stage does not shift another.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Standard-normal draw.
pub fn randn(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Tensor of independent N(0, sigma^2) draws.
pub fn randn_tensor(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let data = (0..shape.iter().product())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

/// Truncated-normal initializer: N(0, sigma^2) redrawn until |x| <= 2*sigma.
/// Draws are rounded through f32 so a freshly initialized model survives the
/// f32 weight-file round trip bit-exactly.
pub fn trunc_normal_tensor(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| {
            loop {
                let x: f64 = randn(rng) * sigma;
                if x.abs() <= 2.0 * sigma {
                    return x as f32 as f64;
                }
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

/// Uniform draw from [lo, hi).
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Uniform integer from [0, n).
pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Fisher-Yates shuffle of indices 0..n.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

/// `k` distinct indices drawn from 0..n, in draw order.
pub fn sample_distinct(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} distinct from {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
