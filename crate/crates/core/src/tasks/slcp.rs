//! Simple likelihood, complex posterior: four Gaussian draws whose mean and
//! covariance are nonlinear in θ.

use super::config::SlcpConstants;
use super::transform::{Marginal, Prior};
use super::{check_dims, Task, TaskError, TaskSpec};

const RHO_LIMIT: f64 = 1.0 - 1e-6;

pub struct Slcp {
    spec: TaskSpec,
    prior: Prior,
    pub constants: SlcpConstants,
}

/// Mean and Cholesky factor [l11, l21, l22] of the per-draw Gaussian.
pub fn slcp_moments(theta: &[f64]) -> ([f64; 2], [f64; 3]) {
    let (s1, s2) = (theta[2] * theta[2], theta[3] * theta[3]);
    let rho = theta[4].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
    ([theta[0], theta[1]], [s1, rho * s2, (1.0 - rho * rho).sqrt() * s2])
}

impl Slcp {
    pub fn new(constants: SlcpConstants) -> Self {
        let b = constants.prior_bound;
        let prior = Prior(vec![Marginal::Uniform { low: -b, high: b }; 5]);
        let spec = TaskSpec {
            name: "slcp".into(),
            dim_theta: 5,
            dim_x: 2 * constants.draws,
            prior: prior.describe(),
            noise_dim: 2 * constants.draws,
            tractable_likelihood: true,
            differentiable: false,
        };
        Self { spec, prior, constants }
    }
}

impl Task for Slcp {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        check_dims(&self.spec, theta, z)?;
        let (m, l) = slcp_moments(theta);
        Ok(z.chunks(2).flat_map(|w| [m[0] + l[0] * w[0], m[1] + l[1] * w[0] + l[2] * w[1]]).collect())
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> Result<f64, TaskError> {
        let (m, l) = slcp_moments(theta);
        let log_det = (l[0] * l[2]).abs().ln();
        if !log_det.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(x.chunks(2)
            .map(|w| {
                let w0 = (w[0] - m[0]) / l[0];
                let w1 = (w[1] - m[1] - l[1] * w0) / l[2];
                -0.5 * (w0 * w0 + w1 * w1) - log_det - (2.0 * std::f64::consts::PI).ln()
            })
            .sum())
    }
}
