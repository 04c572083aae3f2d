//! Source distributions p0 for sampling and likelihood evaluation.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal as Gauss};

use crate::ad::Tensor;

pub trait Source: Send + Sync {
    fn dim(&self) -> usize;
    /// `n` draws as an `[n, dim]` tensor.
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor;
    fn log_prob(&self, row: &[f64]) -> f64;
}

/// N(0, I) in `dim` dimensions.
#[derive(Clone, Copy, Debug)]
pub struct StandardNormal(pub usize);

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Source for StandardNormal {
    fn dim(&self) -> usize {
        self.0
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * self.0).map(|_| Gauss.sample(rng)).collect();
        Tensor::matrix(n, self.0, data).expect("consistent shape")
    }

    fn log_prob(&self, row: &[f64]) -> f64 {
        row.iter().map(|v| -0.5 * v * v - LN_SQRT_2PI).sum()
    }
}

/// Standard normal draws as f64, for path construction.
pub fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| Gauss.sample(rng)).collect()
}
