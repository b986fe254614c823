//! Seeded random streams.
//!
//! All randomness in the crate comes from [`KefsRng`] instances derived from a
//! single configuration seed; nothing reads ambient entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

pub type KefsRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> KefsRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream for a named purpose, so adding draws in one stage
/// does not shift another stage's numbers.
pub fn substream(seed: u64, stream: u64) -> KefsRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut KefsRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix(rng: &mut KefsRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn uniform_matrix(rng: &mut KefsRng, rows: usize, cols: usize, low: f64, high: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(low..high))
}

/// Glorot-uniform initialization for a `fan_in x fan_out` weight.
pub fn glorot(rng: &mut KefsRng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform_matrix(rng, fan_in, fan_out, -limit, limit)
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation(rng: &mut KefsRng, n: usize) -> alloc::vec::Vec<usize> {
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
