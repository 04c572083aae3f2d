//! SIR epidemic with binomial reporting of the infected fraction.

use statrs::distribution::{Binomial, Discrete, DiscreteCDF};

use super::config::SirConstants;
use super::ode::solve;
use super::transform::{Marginal, Prior};
use super::{check_dims, phi, Task, TaskError, TaskSpec};

pub struct Sir {
    spec: TaskSpec,
    prior: Prior,
    pub constants: SirConstants,
}

impl Sir {
    pub fn new(constants: SirConstants) -> Result<Self, TaskError> {
        constants.grid.validate()?;
        if !(constants.population > 0.0) || constants.trials == 0 {
            return Err(TaskError::Config("SIR needs a positive population and trial count".into()));
        }
        let prior = Prior(
            (0..2)
                .map(|i| Marginal::LogNormal { log_mean: constants.prior_log_mean[i], log_std: constants.prior_log_std[i] })
                .collect(),
        );
        let n = constants.grid.obs_times.len();
        let spec = TaskSpec {
            name: "sir".into(),
            dim_theta: 2,
            dim_x: n,
            prior: prior.describe(),
            noise_dim: n,
            tractable_likelihood: true,
            differentiable: false,
        };
        Ok(Self { spec, prior, constants })
    }

    /// (S, I, R) at the observation times; `inspect` sees every internal state.
    pub fn trajectory(&self, theta: &[f64], inspect: impl FnMut(f64, &[f64; 3])) -> Result<Vec<[f64; 3]>, TaskError> {
        if theta.len() != 2 || theta.iter().any(|&p| !(p >= 0.0)) {
            return Err(TaskError::Simulation("SIR needs two non-negative rates".into()));
        }
        let (beta, gamma, n) = (theta[0], theta[1], self.constants.population);
        let y0 = [n - self.constants.i0, self.constants.i0, 0.0];
        solve(
            &self.constants.grid,
            y0,
            |_, y| {
                let inf = beta * y[0] * y[1] / n;
                [-inf, inf - gamma * y[1], gamma * y[1]]
            },
            inspect,
        )
    }

    fn fractions(&self, theta: &[f64]) -> Result<Vec<f64>, TaskError> {
        let n = self.constants.population;
        Ok(self.trajectory(theta, |_, _| {})?.iter().map(|s| (s[1] / n).clamp(0.0, 1.0)).collect())
    }

    fn binomial(&self, p: f64) -> Binomial {
        Binomial::new(p, self.constants.trials).expect("p clamped to [0, 1]")
    }
}

impl Task for Sir {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        check_dims(&self.spec, theta, z)?;
        let m = self.constants.trials as f64;
        Ok(self
            .fractions(theta)?
            .into_iter()
            .zip(z)
            .map(|(p, &zi)| self.binomial(p).inverse_cdf(phi(zi)) as f64 / m)
            .collect())
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> Result<f64, TaskError> {
        if theta.iter().any(|&p| !(p > 0.0)) {
            return Ok(f64::NEG_INFINITY);
        }
        let m = self.constants.trials as f64;
        Ok(self
            .fractions(theta)?
            .into_iter()
            .zip(x)
            .map(|(p, &xi)| self.binomial(p).ln_pmf((xi * m).round().max(0.0) as u64))
            .sum())
    }
}
