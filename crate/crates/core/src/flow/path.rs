//! Probability paths and their regression targets.

use serde::{Deserialize, Serialize};

use super::FlowError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    /// Gaussian source whose std shrinks linearly from 1 to `sigma_min`.
    ConditionalOt,
    /// Straight lines between independent source and data draws, blurred by `sigma`.
    IndependentCoupling,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub kind: PathKind,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Time prior exponent: density ∝ t^alpha.
    #[serde(default)]
    pub alpha: f64,
}

fn default_sigma_min() -> f64 {
    1e-4
}
fn default_sigma() -> f64 {
    1e-3
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { kind: PathKind::ConditionalOt, sigma_min: 1e-4, sigma: 1e-3, alpha: 0.0 }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(FlowError::Config(format!("sigma_min must lie in (0, 1), got {}", self.sigma_min)));
        }
        if self.sigma <= 0.0 {
            return Err(FlowError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.alpha <= -1.0 {
            return Err(FlowError::Config(format!("time exponent must exceed -1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One regression tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub theta_t: Vec<f64>,
    pub u_target: Vec<f64>,
    pub z: Vec<f64>,
    pub x_o: Vec<f64>,
}

/// θ_t = tθ1 + (1 − (1−σ_min)t)z, u = (θ1 − (1−σ_min)θ_t) / (1 − (1−σ_min)t).
pub fn sample_ot_path(theta1: &[f64], x_o: &[f64], t: f64, z: &[f64], sigma_min: f64) -> Result<PathSample, FlowError> {
    if theta1.len() != z.len() {
        return Err(FlowError::Shape(format!("theta has {} entries, noise {}", theta1.len(), z.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Time(t));
    }
    let k = 1.0 - sigma_min;
    let scale = 1.0 - k * t;
    if scale <= 0.0 || !(sigma_min > 0.0) {
        return Err(FlowError::Config(format!("sigma_min {sigma_min} gives non-positive scale at t={t}")));
    }
    let theta_t: Vec<f64> = theta1.iter().zip(z).map(|(&a, &b)| t * a + scale * b).collect();
    let u_target = theta1.iter().zip(&theta_t).map(|(&a, &b)| (a - k * b) / scale).collect();
    Ok(PathSample { t, theta_t, u_target, z: z.to_vec(), x_o: x_o.to_vec() })
}

/// θ_t = tθ1 + (1−t)θ0 + σz, u = θ1 − θ0.
pub fn sample_ic_path(
    theta0: &[f64],
    theta1: &[f64],
    x_o: &[f64],
    t: f64,
    z: &[f64],
    sigma: f64,
) -> Result<PathSample, FlowError> {
    if theta0.len() != theta1.len() || z.len() != theta1.len() {
        return Err(FlowError::Shape("coupled endpoints and noise must share a dimension".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Time(t));
    }
    let theta_t = (0..theta1.len()).map(|i| t * theta1[i] + (1.0 - t) * theta0[i] + sigma * z[i]).collect();
    let u_target = theta1.iter().zip(theta0).map(|(a, b)| a - b).collect();
    Ok(PathSample { t, theta_t, u_target, z: z.to_vec(), x_o: x_o.to_vec() })
}

/// Inverse CDF of the density ∝ t^α on [0, 1].
pub fn sample_time(alpha: f64, u: f64) -> Result<f64, FlowError> {
    if alpha <= -1.0 {
        return Err(FlowError::Config(format!("time exponent must exceed -1, got {alpha}")));
    }
    Ok(u.powf(1.0 / (1.0 + alpha)))
}

/// Smallest admissible 1 − t when turning a denoised estimate into a velocity.
pub const X_PREDICTION_TOL: f64 = 1e-6;

/// v = (x̂1 − θ_t)/(1−t).
pub fn velocity_from_x_prediction(x1: &[f64], theta_t: &[f64], t: f64) -> Result<Vec<f64>, FlowError> {
    if t >= 1.0 - X_PREDICTION_TOL {
        return Err(FlowError::Time(t));
    }
    Ok(x1.iter().zip(theta_t).map(|(a, b)| (a - b) / (1.0 - t)).collect())
}

/// θ̂1 = θ_t + (1−t)v.
pub fn one_step_estimate(theta_t: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    theta_t.iter().zip(v).map(|(a, b)| a + (1.0 - t) * b).collect()
}
