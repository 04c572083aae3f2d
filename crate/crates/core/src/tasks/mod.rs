//! Benchmark simulators with priors, noise models and likelihoods.
//!
//! Every simulator is a pure function of `(θ, z)` where `z` is a fixed-length
//! standard-normal block, so a seeded noise draw reproduces an observation.

pub mod config;
pub mod linear_gaussian;
pub mod lv;
pub mod ode;
pub mod sir;
pub mod slcp;
pub mod transform;
pub mod two_moons;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::TaskConstants;
pub use linear_gaussian::LinearGaussian;
pub use lv::LotkaVolterra;
pub use ode::{rk4_step, solve, OdeGrid};
pub use sir::Sir;
pub use slcp::Slcp;
pub use transform::{Marginal, ObsTransform, Prior, Standardizer};
pub use two_moons::TwoMoons;

use crate::flow::normal_vec;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task configuration: {0}")]
    Config(String),
    #[error("simulator failure: {0}")]
    Simulation(String),
    #[error("{task} does not support {what}")]
    Unsupported { task: String, what: &'static str },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dim_theta: usize,
    pub dim_x: usize,
    pub prior: String,
    pub noise_dim: usize,
    pub tractable_likelihood: bool,
    pub differentiable: bool,
}

pub trait Task: Send + Sync {
    fn spec(&self) -> &TaskSpec;
    fn prior(&self) -> &Prior;
    fn simulate(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError>;

    fn obs_transform(&self) -> ObsTransform {
        ObsTransform::Identity
    }

    fn log_likelihood(&self, _theta: &[f64], _x: &[f64]) -> Result<f64, TaskError> {
        Err(self.unsupported("likelihood evaluation"))
    }

    /// Cost of the simulation at flow coordinates `u` against a raw
    /// observation, with its exact gradient with respect to `u`.
    fn cost_grad(&self, _u: &[f64], _x_o: &[f64], _z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        Err(self.unsupported("cost gradients"))
    }

    fn sample_noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        normal_vec(self.spec().noise_dim, rng)
    }

    fn sample_prior(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.prior().sample(rng)).collect()
    }

    fn prior_log_prob(&self, theta: &[f64]) -> f64 {
        self.prior().log_prob(theta)
    }

    fn unsupported(&self, what: &'static str) -> TaskError {
        TaskError::Unsupported { task: self.spec().name.clone(), what }
    }
}

pub const TASK_NAMES: [&str; 5] = ["lotka-volterra", "sir", "two-moons", "slcp", "linear-gaussian"];

pub fn make_task(name: &str, constants: &TaskConstants) -> Result<Box<dyn Task>, TaskError> {
    Ok(match name {
        "lotka-volterra" | "lv" => Box::new(LotkaVolterra::new(constants.lotka_volterra.clone())?),
        "sir" => Box::new(Sir::new(constants.sir.clone())?),
        "two-moons" | "tm" => Box::new(TwoMoons::new(constants.two_moons.clone())),
        "slcp" => Box::new(Slcp::new(constants.slcp.clone())),
        "linear-gaussian" => Box::new(LinearGaussian::new(constants.linear_gaussian.clone())),
        other => return Err(TaskError::Config(format!("unknown task '{other}'"))),
    })
}

pub(crate) fn check_dims(spec: &TaskSpec, theta: &[f64], z: &[f64]) -> Result<(), TaskError> {
    if theta.len() != spec.dim_theta || z.len() != spec.noise_dim {
        return Err(TaskError::Config(format!(
            "{}: expected θ of length {} and z of length {}, got {} and {}",
            spec.name,
            spec.dim_theta,
            spec.noise_dim,
            theta.len(),
            z.len()
        )));
    }
    Ok(())
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}
