//! Lotka-Volterra predator-prey model with log-normal observation noise.
//!
//! The ODE is integrated in log-population coordinates (a, b) = (ln X, ln Y):
//! da/dt = α − β·e^b, db/dt = −γ + δ·e^a.

use crate::ad::{Dual, Real};
use crate::flow::LN_SQRT_2PI;

use super::config::LotkaVolterraConstants;
use super::ode::{solve, OdeGrid};
use super::transform::{Marginal, ObsTransform, Prior};
use super::{check_dims, Task, TaskError, TaskSpec};

/// Log-populations at the grid's observation times. `inspect` sees every
/// internal RK4 state.
pub fn lv_solve<T: Real>(
    theta: &[T; 4],
    state0: (f64, f64),
    grid: &OdeGrid,
    inspect: impl FnMut(f64, &[T; 2]),
) -> Result<Vec<[T; 2]>, TaskError> {
    if theta.iter().any(|p| !(p.val() >= 0.0)) || !(state0.0 > 0.0 && state0.1 > 0.0) {
        return Err(TaskError::Simulation("Lotka-Volterra needs non-negative rates and a positive state".into()));
    }
    let [alpha, beta, gamma, delta] = *theta;
    let y0 = [T::cst(state0.0.ln()), T::cst(state0.1.ln())];
    solve(grid, y0, |_, y| [alpha - beta * y[1].exp(), delta * y[0].exp() - gamma], inspect)
}

pub struct LotkaVolterra {
    spec: TaskSpec,
    prior: Prior,
    pub constants: LotkaVolterraConstants,
}

impl LotkaVolterra {
    pub fn new(constants: LotkaVolterraConstants) -> Result<Self, TaskError> {
        constants.grid.validate()?;
        let prior = Prior(
            (0..4)
                .map(|i| Marginal::LogNormal { log_mean: constants.prior_log_mean[i], log_std: constants.prior_log_std[i] })
                .collect(),
        );
        let n_obs = constants.grid.obs_times.len();
        let spec = TaskSpec {
            name: "lotka-volterra".into(),
            dim_theta: 4,
            dim_x: 2 * n_obs,
            prior: prior.describe(),
            noise_dim: 2 * n_obs,
            tractable_likelihood: true,
            differentiable: true,
        };
        Ok(Self { spec, prior, constants })
    }

    fn state0(&self) -> (f64, f64) {
        (self.constants.x0, self.constants.y0)
    }

    /// Noiseless log-observations laid out as [ln X(t_i)…, ln Y(t_i)…].
    pub fn log_trajectory<T: Real>(&self, theta: &[T; 4]) -> Result<Vec<T>, TaskError> {
        let states = lv_solve(theta, self.state0(), &self.constants.grid, |_, _| {})?;
        Ok(states.iter().map(|s| s[0]).chain(states.iter().map(|s| s[1])).collect())
    }

    fn log_lik_generic<T: Real>(&self, theta: &[T; 4], x: &[f64]) -> Result<T, TaskError> {
        if x.iter().any(|&v| !(v > 0.0)) {
            return Err(TaskError::Config("Lotka-Volterra observations must be positive".into()));
        }
        let s = self.constants.sigma_obs;
        let mut acc = T::cst(0.0);
        for (m, &xi) in self.log_trajectory(theta)?.into_iter().zip(x) {
            let r = (m - xi.ln()) / s;
            acc -= r.sqr() * 0.5 + (s.ln() + LN_SQRT_2PI + xi.ln());
        }
        Ok(acc)
    }

    /// Log-likelihood and its gradient with respect to θ.
    pub fn log_likelihood_grad(&self, theta: &[f64], x: &[f64]) -> Result<(f64, [f64; 4]), TaskError> {
        let th = to4(theta)?;
        let l = self.log_lik_generic(&Dual::vars(&th), x)?;
        Ok((l.v, l.d))
    }

    fn cost_generic<T: Real>(&self, theta: &[T; 4], x_o: &[f64], z: &[f64]) -> Result<T, TaskError> {
        let s = self.constants.sigma_obs;
        let m = self.log_trajectory(theta)?;
        let mut acc = T::cst(0.0);
        for ((mi, &xi), &zi) in m.iter().zip(x_o).zip(z) {
            acc += ((*mi + s * zi - xi.max(1e-12).ln()) / s).sqr() * 0.5;
        }
        Ok(acc / m.len() as f64)
    }
}

fn to4(theta: &[f64]) -> Result<[f64; 4], TaskError> {
    theta.try_into().map_err(|_| TaskError::Config(format!("Lotka-Volterra θ has 4 entries, got {}", theta.len())))
}

impl Task for LotkaVolterra {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn obs_transform(&self) -> ObsTransform {
        ObsTransform::Log
    }

    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        check_dims(&self.spec, theta, z)?;
        let m = self.log_trajectory(&to4(theta)?)?;
        let s = self.constants.sigma_obs;
        let x: Vec<f64> = m.iter().zip(z).map(|(mi, zi)| (mi + s * zi).exp()).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::Simulation("observation overflow".into()));
        }
        Ok(x)
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> Result<f64, TaskError> {
        if theta.iter().any(|&p| !(p > 0.0)) {
            return Ok(f64::NEG_INFINITY);
        }
        self.log_lik_generic(&to4(theta)?, x)
    }

    /// Mean over entries of ½((ln S_z(θ) − ln x_o)/σ)², differentiated in
    /// flow coordinates.
    fn cost_grad(&self, u: &[f64], x_o: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        if x_o.len() != self.spec.dim_x || z.len() != self.spec.noise_dim {
            return Err(TaskError::Config("observation or noise length mismatch".into()));
        }
        let uv = Dual::<4>::vars(&to4(u)?);
        let th: [Dual<4>; 4] = self.prior.from_flow(&uv).try_into().expect("four coordinates");
        let c = self.cost_generic(&th, x_o, z)?;
        if !c.is_finite() || c.d.iter().any(|d| !d.is_finite()) {
            return Err(TaskError::Simulation("non-finite cost".into()));
        }
        Ok((c.v, c.d.to_vec()))
    }
}
