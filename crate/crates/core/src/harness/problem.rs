//! Benchmark tasks and the lensing simulator behind one interface.

use rand_chacha::ChaCha8Rng;

use super::{ExperimentConfig, HarnessError};
use crate::control::{Simulator, TaskSimulator};
use crate::flow::normal_vec;
use crate::lens::{image_to_flow, noise_sigma, render, LensScene, LensSimulator, FREE_INDEX, N_FREE};
use crate::tasks::{make_task, LinearGaussian, Standardizer, Task, TaskConstants, TaskError, TwoMoons};

pub enum Problem {
    Task { task: Box<dyn Task>, constants: TaskConstants },
    Lens(LensSimulator),
}

/// Log-density over sampler coordinates.
pub type LogDensity<'a> = Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>;

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        if cfg.task == "lens" {
            Ok(Problem::Lens(LensSimulator::new(cfg.lens.instrument.clone(), cfg.lens.prior.clone())?))
        } else {
            Ok(Problem::Task { task: make_task(&cfg.task, &cfg.constants)?, constants: cfg.constants.clone() })
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Problem::Task { task: t, .. } => &t.spec().name,
            Problem::Lens(_) => "lens",
        }
    }

    /// Parameter dimension seen by the flow.
    pub fn dim_theta(&self) -> usize {
        match self {
            Problem::Task { task: t, .. } => t.spec().dim_theta,
            Problem::Lens(l) => l.dim_theta(),
        }
    }

    pub fn dim_x(&self) -> usize {
        match self {
            Problem::Task { task: t, .. } => t.spec().dim_x,
            Problem::Lens(l) => l.dim_x(),
        }
    }

    pub fn sample_prior(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Problem::Task { task: t, .. } => t.sample_prior(1, rng).remove(0),
            Problem::Lens(l) => l.prior.sample(rng).to_array().to_vec(),
        }
    }

    /// Raw observation with fresh noise from `rng`.
    pub fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TaskError> {
        match self {
            Problem::Task { task: t, .. } => {
                let z = t.sample_noise(rng);
                t.simulate(theta, &z)
            }
            Problem::Lens(l) => {
                let scene = scene_of(theta)?;
                scene.validate()?;
                let z = normal_vec(l.instrument().pixels(), rng);
                Ok(render(&scene, l.instrument(), &z).image)
            }
        }
    }

    pub fn theta_to_flow(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Problem::Task { task: t, .. } => t.prior().to_flow(theta),
            Problem::Lens(l) => l.coords.to_flow(&scene_of(theta).expect("23 lens parameters")),
        }
    }

    pub fn theta_from_flow(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Problem::Task { task: t, .. } => t.prior().from_flow(u),
            Problem::Lens(l) => l.coords.from_flow(u).to_array().to_vec(),
        }
    }

    /// Tasks standardize per column after their observation transform;
    /// lens images only go through asinh.
    pub fn fit_standardizer(&self, xs: &[Vec<f64>]) -> Result<Standardizer, HarnessError> {
        match self {
            Problem::Task { task: t, .. } => Ok(Standardizer::fit(xs, t.obs_transform())?),
            Problem::Lens(l) => Ok(Standardizer::identity(l.dim_x())),
        }
    }

    pub fn x_to_flow(&self, standardizer: &Standardizer, x: &[f64]) -> Vec<f32> {
        let v = match self {
            Problem::Task { .. } => standardizer.apply(x),
            Problem::Lens(_) => image_to_flow(x),
        };
        v.into_iter().map(|v| v as f32).collect()
    }

    pub fn simulator<'a>(&'a self, standardizer: &Standardizer) -> Box<dyn Simulator + 'a> {
        match self {
            Problem::Task { task: t, .. } => Box::new(TaskSimulator { task: t.as_ref(), standardizer: standardizer.clone() }),
            Problem::Lens(l) => Box::new(l.clone()),
        }
    }

    /// Dimension of the MCMC state: the free lens parameters for lensing.
    pub fn mcmc_dim(&self) -> usize {
        match self {
            Problem::Task { task: t, .. } => t.spec().dim_theta,
            Problem::Lens(_) => N_FREE,
        }
    }

    pub fn mcmc_init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Problem::Task { .. } => self.sample_prior(rng),
            Problem::Lens(l) => l.prior.sample(rng).free().to_vec(),
        }
    }

    pub fn mcmc_to_theta(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Problem::Task { .. } => p.to_vec(),
            Problem::Lens(_) => {
                let r: [f64; N_FREE] = p.try_into().expect("17 free parameters");
                LensScene::from_free(&r).to_array().to_vec()
            }
        }
    }

    /// Unnormalized log-posterior in MCMC coordinates, when the likelihood
    /// is tractable.
    pub fn log_posterior<'a>(&'a self, x: &'a [f64]) -> Option<LogDensity<'a>> {
        match self {
            Problem::Task { task: t, .. } => {
                if !t.spec().tractable_likelihood {
                    return None;
                }
                Some(Box::new(move |theta: &[f64]| {
                    let lp = t.prior_log_prob(theta);
                    if !lp.is_finite() {
                        return f64::NEG_INFINITY;
                    }
                    match t.log_likelihood(theta, x) {
                        Ok(ll) if ll.is_finite() => lp + ll,
                        _ => f64::NEG_INFINITY,
                    }
                }))
            }
            Problem::Lens(l) => Some(Box::new(move |p: &[f64]| {
                let Ok(r) = <[f64; N_FREE]>::try_from(p) else {
                    return f64::NEG_INFINITY;
                };
                let lp = l.prior.log_prob_free(&r);
                let scene = LensScene::from_free(&r);
                if !lp.is_finite() || scene.validate().is_err() {
                    return f64::NEG_INFINITY;
                }
                let model = l.chi2_eval().model(&scene.to_array());
                let sigma = noise_sigma(&model, l.instrument());
                let ll: f64 =
                    model.iter().zip(x).zip(&sigma).map(|((m, xi), s)| -0.5 * ((xi - m) / s).powi(2) - s.ln()).sum();
                lp + ll
            })),
        }
    }

    /// Exact posterior draws where a closed form exists.
    pub fn analytic_posterior(&self, x: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
        let Problem::Task { task: t, constants } = self else { return None };
        match t.spec().name.as_str() {
            "linear-gaussian" => {}
            "two-moons" => return TwoMoons::new(constants.two_moons.clone()).posterior_samples(x, n, rng),
            _ => return None,
        }
        let lg = LinearGaussian::new(constants.linear_gaussian.clone());
        let (mean, var) = lg.posterior(x);
        Some((0..n).map(|_| normal_vec(mean.len(), rng).iter().zip(&mean).map(|(z, m)| m + var.sqrt() * z).collect()).collect())
    }

    /// Lens coordinates that carry information (the free ones).
    pub fn informative_coords(&self) -> Vec<usize> {
        match self {
            Problem::Task { task: t, .. } => (0..t.spec().dim_theta).collect(),
            Problem::Lens(_) => FREE_INDEX.to_vec(),
        }
    }
}

fn scene_of(theta: &[f64]) -> Result<LensScene, TaskError> {
    let p: [f64; crate::lens::N_PARAMS] =
        theta.try_into().map_err(|_| TaskError::Config(format!("lens scenes have 23 parameters, got {}", theta.len())))?;
    Ok(LensScene::from_array(&p))
}
