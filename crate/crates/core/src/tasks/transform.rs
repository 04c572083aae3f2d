//! Independent priors and the maps between parameter space and the
//! standardized space the flows are trained in.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::flow::LN_SQRT_2PI;

use super::TaskError;

/// One coordinate of a factorized prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Normal { mean: f64, std: f64 },
    /// log θ ~ N(log_mean, log_std²).
    LogNormal { log_mean: f64, log_std: f64 },
    Uniform { low: f64, high: f64 },
}

impl Marginal {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Marginal::Normal { mean, std } => mean + std * Distribution::<f64>::sample(&StandardNormal, rng),
            Marginal::LogNormal { log_mean, log_std } => (log_mean + log_std * Distribution::<f64>::sample(&StandardNormal, rng)).exp(),
            Marginal::Uniform { low, high } => rng.random_range(low..high),
        }
    }

    pub fn log_prob(&self, v: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, std } => -0.5 * ((v - mean) / std).powi(2) - std.ln() - LN_SQRT_2PI,
            Marginal::LogNormal { log_mean, log_std } => {
                if v <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                -0.5 * ((v.ln() - log_mean) / log_std).powi(2) - log_std.ln() - LN_SQRT_2PI - v.ln()
            }
            Marginal::Uniform { low, high } => {
                if (low..=high).contains(&v) {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Affine centre and scale of the flow coordinate.
    fn loc_scale(&self) -> (f64, f64) {
        match *self {
            Marginal::Normal { mean, std } => (mean, std),
            Marginal::LogNormal { log_mean, log_std } => (log_mean, log_std),
            Marginal::Uniform { low, high } => (0.5 * (low + high), (high - low) / 12f64.sqrt()),
        }
    }

    pub fn to_flow(&self, v: f64) -> f64 {
        let (m, s) = self.loc_scale();
        match self {
            Marginal::LogNormal { .. } => (v.ln() - m) / s,
            _ => (v - m) / s,
        }
    }

    pub fn from_flow<T: Real>(&self, u: T) -> T {
        let (m, s) = self.loc_scale();
        match self {
            Marginal::LogNormal { .. } => (u * s + m).exp(),
            _ => u * s + m,
        }
    }

    /// log |dθ/du| at flow coordinate `u`.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        let (m, s) = self.loc_scale();
        match self {
            Marginal::LogNormal { .. } => s.ln() + m + s * u,
            _ => s.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior(pub Vec<Marginal>);

impl Prior {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0.iter().map(|m| m.sample(rng)).collect()
    }

    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        self.0.iter().zip(theta).map(|(m, &v)| m.log_prob(v)).sum()
    }

    pub fn to_flow(&self, theta: &[f64]) -> Vec<f64> {
        self.0.iter().zip(theta).map(|(m, &v)| m.to_flow(v)).collect()
    }

    pub fn from_flow<T: Real>(&self, u: &[T]) -> Vec<T> {
        self.0.iter().zip(u).map(|(m, &v)| m.from_flow(v)).collect()
    }

    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        self.0.iter().zip(u).map(|(m, &v)| m.log_jacobian(v)).sum()
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(&self.0).expect("serializable")
    }
}

/// Pre-processing applied to raw observations before standardization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsTransform {
    Identity,
    Log,
}

impl ObsTransform {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ObsTransform::Identity => x,
            ObsTransform::Log => x.max(1e-12).ln(),
        }
    }
}

/// Per-column affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub transform: ObsTransform,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { transform: ObsTransform::Identity, mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(rows: &[Vec<f64>], transform: ObsTransform) -> Result<Self, TaskError> {
        let d = rows.first().map(|r| r.len()).ok_or_else(|| TaskError::Config("cannot fit on zero rows".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(TaskError::Config("ragged observation rows".into()));
            }
            for (j, &v) in r.iter().enumerate() {
                let v = transform.apply(v);
                mean[j] += v / n;
                sq[j] += v * v / n;
            }
        }
        let std = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0).sqrt().max(1e-8)).collect();
        Ok(Self { transform, mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| (self.transform.apply(v) - self.mean[j]) / self.std[j])
            .collect()
    }
}
