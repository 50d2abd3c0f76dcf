//! Seeded fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(seed: u64, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..shape.numel()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
