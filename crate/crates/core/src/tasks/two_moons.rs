//! Two Moons: a crescent of radius ~0.1 shifted by a parameter-dependent
//! offset whose |θ1 + θ2| term makes the posterior bimodal.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::flow::LN_SQRT_2PI;

use super::config::TwoMoonsConstants;
use super::transform::{Marginal, Prior};
use super::{check_dims, phi, Task, TaskError, TaskSpec};

pub struct TwoMoons {
    spec: TaskSpec,
    prior: Prior,
    pub constants: TwoMoonsConstants,
}

impl TwoMoons {
    pub fn new(constants: TwoMoonsConstants) -> Self {
        let b = constants.prior_bound;
        let prior = Prior(vec![Marginal::Uniform { low: -b, high: b }; 2]);
        let spec = TaskSpec {
            name: "two-moons".into(),
            dim_theta: 2,
            dim_x: 2,
            prior: prior.describe(),
            noise_dim: 2,
            tractable_likelihood: true,
            differentiable: false,
        };
        Self { spec, prior, constants }
    }

    fn shift(theta: &[f64]) -> (f64, f64) {
        (-(theta[0] + theta[1]).abs() * FRAC_1_SQRT_2, (theta[1] - theta[0]) * FRAC_1_SQRT_2)
    }

    /// Observation for an explicit angle and radius.
    pub fn observe(&self, theta: &[f64], a: f64, r: f64) -> Vec<f64> {
        let (sx, sy) = Self::shift(theta);
        vec![r * a.cos() + self.constants.offset + sx, r * a.sin() + sy]
    }

    /// Exact posterior draws. Each (a, r) draw fixes the shift; the shift
    /// map is orthonormal on both branches of |θ1 + θ2|, so picking a branch
    /// uniformly and rejecting outside the prior box is exact. `None` when
    /// the acceptance rate is too low to finish.
    pub fn posterior_samples(&self, x: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
        let b = self.constants.prior_bound;
        let mut out = Vec::with_capacity(n);
        let mut tries = 0usize;
        while out.len() < n {
            tries += 1;
            if tries > 1000 * n + 100_000 {
                return None;
            }
            let a = PI * (rng.random::<f64>() - 0.5);
            let r = self.constants.r_mean + self.constants.r_std * Distribution::<f64>::sample(&StandardNormal, rng);
            let sx = x[0] - self.constants.offset - r * a.cos();
            let sy = x[1] - r * a.sin();
            if sx > 0.0 {
                continue;
            }
            let sum = if rng.random::<bool>() { -sx } else { sx } * std::f64::consts::SQRT_2;
            let diff = sy * std::f64::consts::SQRT_2;
            let theta = [(sum - diff) / 2.0, (sum + diff) / 2.0];
            if theta.iter().all(|v| (-b..=b).contains(v)) {
                out.push(theta.to_vec());
            }
        }
        Some(out)
    }
}

impl Task for TwoMoons {
    fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        check_dims(&self.spec, theta, z)?;
        let a = PI * (phi(z[0]) - 0.5);
        let r = self.constants.r_mean + self.constants.r_std * z[1];
        Ok(self.observe(theta, a, r))
    }

    /// Change of variables from (a, r) to the crescent point: the Jacobian is r.
    fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> Result<f64, TaskError> {
        let (sx, sy) = Self::shift(theta);
        let (px, py) = (x[0] - sx - self.constants.offset, x[1] - sy);
        let r = px.hypot(py);
        let a = py.atan2(px);
        if !(a.abs() <= FRAC_PI_2) || r == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let (m, s) = (self.constants.r_mean, self.constants.r_std);
        Ok(-PI.ln() - 0.5 * ((r - m) / s).powi(2) - s.ln() - LN_SQRT_2PI - r.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskConstants;

    #[test]
    fn formula_at_the_origin() {
        let t = TwoMoons::new(TaskConstants::default().two_moons);
        let x = t.simulate(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((x[0] - 0.35).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn posterior_draws_have_positive_likelihood_and_both_branches() {
        use rand::SeedableRng;
        let t = TwoMoons::new(TaskConstants::default().two_moons);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.simulate(&[0.3, 0.2], &[0.1, -0.4]).unwrap();
        let s = t.posterior_samples(&x, 2000, &mut rng).unwrap();
        assert!(s.iter().all(|th| t.log_likelihood(th, &x).unwrap().is_finite()));
        let pos = s.iter().filter(|th| th[0] + th[1] > 0.0).count();
        assert!((800..1200).contains(&pos), "{pos}");
    }
}
