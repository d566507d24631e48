//! Helpers shared by the integration test binaries.
//!
//! Each test binary compiles its own copy, and none of them uses every
//! helper, so dead-code analysis is off here.
#![allow(dead_code)]

pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxreg::tensor::TensorData;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> TensorData {
    TensorData::random_uniform(shape, lo, hi, &mut rng(seed))
}

/// Max |a-b| over two equal-length slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
