//! x = θ + σ·z with a Gaussian prior: the posterior is Gaussian in closed
//! form, which makes it the reference task for sampler checks.

use crate::flow::LN_SQRT_2PI;

use super::config::LinearGaussianConstants;
use super::transform::{Marginal, Prior};
use super::{check_dims, Task, TaskError, TaskSpec};

pub struct LinearGaussian {
    spec: TaskSpec,
    prior: Prior,
    pub constants: LinearGaussianConstants,
}

impl LinearGaussian {
    pub fn new(constants: LinearGaussianConstants) -> Self {
        let prior = Prior(vec![Marginal::Normal { mean: 0.0, std: constants.prior_std }; constants.dim]);
        let spec = TaskSpec {
            name: "linear-gaussian".into(),
            dim_theta: constants.dim,
            dim_x: constants.dim,
            prior: prior.describe(),
            noise_dim: constants.dim,
            tractable_likelihood: true,
            differentiable: true,
        };
        Self { spec, prior, constants }
    }

    /// Posterior mean and per-coordinate variance given `x`.
    pub fn posterior(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let (p, n) = (self.constants.prior_std.powi(2), self.constants.noise_std.powi(2));
        let shrink = p / (p + n);
        (x.iter().map(|v| shrink * v).collect(), p * n / (p + n))
    }
}

impl Task for LinearGaussian {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        check_dims(&self.spec, theta, z)?;
        Ok(theta.iter().zip(z).map(|(t, zi)| t + self.constants.noise_std * zi).collect())
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> Result<f64, TaskError> {
        let s = self.constants.noise_std;
        Ok(theta.iter().zip(x).map(|(t, xi)| -0.5 * ((xi - t) / s).powi(2) - s.ln() - LN_SQRT_2PI).sum())
    }

    /// Mean over entries of ½((S_z(θ) − x_o)/σ)².
    fn cost_grad(&self, u: &[f64], x_o: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        check_dims(&self.spec, u, z)?;
        let theta = self.prior.from_flow(u);
        let (s, d) = (self.constants.noise_std, u.len() as f64);
        let r: Vec<f64> = self.simulate(&theta, z)?.iter().zip(x_o).map(|(a, b)| (a - b) / s).collect();
        let cost = r.iter().map(|v| 0.5 * v * v).sum::<f64>() / d;
        let grad = r.iter().map(|v| v / s * self.constants.prior_std / d).collect();
        Ok((cost, grad))
    }
}
