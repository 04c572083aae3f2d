//! In-memory building blocks of an experiment.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ControlSetup, HarnessError, McmcConfig, Problem, ReferenceKind};
use crate::ad::Tensor;
use crate::control::{finetune_with_controls, sample_with_controls, ControlDataset, ControlNet, FinetuneReport};
use crate::flow::{sample_posterior, train, ModelConfig, StandardNormal, TrainConfig, TrainReport, TrainingSet, VelocityModel};
use crate::mcmc::{aies_run, default_walkers, AiesConfig, Chains, Ensemble};
use crate::rng::{derive_seed, stream};
use crate::tasks::Standardizer;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Raw parameters.
    pub theta: Vec<Vec<f64>>,
    /// Raw observations.
    pub x: Vec<Vec<f64>>,
    pub failures: usize,
}

/// Prior draws and simulations; row `i` uses its own RNG stream, so the
/// result does not depend on how rows are scheduled.
pub fn generate(problem: &Problem, n: usize, seed: u64, max_failure_rate: f64) -> Result<Dataset, HarnessError> {
    let mut theta = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut failures = 0;
    let mut first_error = None;
    for i in 0..n {
        let mut rng = stream(seed, "generate", i as u64);
        let t = problem.sample_prior(&mut rng);
        match problem.simulate(&t, &mut rng) {
            Ok(v) if v.iter().all(|e| e.is_finite()) => {
                theta.push(t);
                x.push(v);
            }
            other => {
                failures += 1;
                if first_error.is_none() {
                    first_error = Some(match other {
                        Err(e) => e.to_string(),
                        Ok(_) => "non-finite observation".into(),
                    });
                }
            }
        }
    }
    if failures as f64 > max_failure_rate * n as f64 {
        return Err(HarnessError::Numerical(format!(
            "{failures} of {n} simulations failed (limit {:.1}%); first error: {}",
            100.0 * max_failure_rate,
            first_error.unwrap_or_default()
        )));
    }
    Ok(Dataset { theta, x, failures })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

/// Held-out observations from their own stream.
pub fn observations(problem: &Problem, seed: u64, n: usize) -> Result<Vec<Observation>, HarnessError> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, "observation", i as u64);
            for _ in 0..100 {
                let theta = problem.sample_prior(&mut rng);
                if let Ok(x) = problem.simulate(&theta, &mut rng) {
                    return Ok(Observation { theta, x });
                }
            }
            Err(HarnessError::Numerical(format!("no valid simulation for observation {i}")))
        })
        .collect()
}

pub fn training_set(problem: &Problem, standardizer: &Standardizer, data: &Dataset) -> Result<TrainingSet, HarnessError> {
    let theta: Vec<Vec<f32>> =
        data.theta.iter().map(|t| problem.theta_to_flow(t).into_iter().map(|v| v as f32).collect()).collect();
    let x: Vec<Vec<f32>> = data.x.iter().map(|x| problem.x_to_flow(standardizer, x)).collect();
    Ok(TrainingSet::new(Tensor::from_rows(&theta)?, Tensor::from_rows(&x)?)?)
}

pub struct Trained {
    pub model: VelocityModel,
    pub standardizer: Standardizer,
    pub report: TrainReport,
}

pub fn train_base(
    problem: &Problem,
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained, HarnessError> {
    let standardizer = problem.fit_standardizer(&data.x)?;
    let set = training_set(problem, &standardizer, data)?;
    let mut m = VelocityModel::new(model.clone(), problem.dim_theta(), problem.dim_x(), derive_seed(seed, "init", 0))?;
    let report = train(&mut m, &set, cfg, &StandardNormal(problem.dim_theta()))?;
    Ok(Trained { model: m, standardizer, report })
}

/// Posterior draws from the base flow, in raw parameter space.
pub fn sample_base(
    problem: &Problem,
    model: &VelocityModel,
    standardizer: &Standardizer,
    x: &[f64],
    n: usize,
    euler_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let xo = problem.x_to_flow(standardizer, x);
    let u = sample_posterior(model, &xo, n, euler_steps, &StandardNormal(problem.dim_theta()), rng)?;
    Ok(rows_from_flow(problem, &u))
}

fn rows_from_flow(problem: &Problem, u: &Tensor) -> Vec<Vec<f64>> {
    (0..u.rows())
        .map(|r| problem.theta_from_flow(&u.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect()
}

pub fn control_dataset(problem: &Problem, standardizer: &Standardizer, data: &Dataset, n: Option<usize>) -> Result<ControlDataset, HarnessError> {
    let n = n.unwrap_or(data.theta.len()).min(data.theta.len());
    let sub = Dataset { theta: data.theta[..n].to_vec(), x: data.x[..n].to_vec(), failures: 0 };
    let set = training_set(problem, standardizer, &sub)?;
    let raw: Vec<Vec<f32>> = sub.x.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    Ok(ControlDataset::new(set.theta, set.x, Some(Tensor::from_rows(&raw)?))?)
}

pub fn finetune(
    problem: &Problem,
    base: &Trained,
    data: &Dataset,
    setup: &ControlSetup,
    seed: u64,
) -> Result<(ControlNet, FinetuneReport), HarnessError> {
    let sim = problem.simulator(&base.standardizer);
    let mut control = ControlNet::new(setup.net.clone(), problem.dim_theta(), problem.dim_x(), derive_seed(seed, "control-init", 0))?;
    let ds = control_dataset(problem, &base.standardizer, data, setup.n_data)?;
    let report = finetune_with_controls(&base.model, &mut control, sim.as_ref(), &ds, &setup.finetune)?;
    Ok((control, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlledDraws {
    pub samples: Vec<Vec<f64>>,
    pub failed: usize,
    pub simulator_calls: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_controlled(
    problem: &Problem,
    base: &VelocityModel,
    standardizer: &Standardizer,
    control: &ControlNet,
    x: &[f64],
    n: usize,
    euler_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ControlledDraws, HarnessError> {
    let sim = problem.simulator(standardizer);
    let xo = problem.x_to_flow(standardizer, x);
    let out = sample_with_controls(base, control, sim.as_ref(), &xo, x, n, euler_steps, &StandardNormal(problem.dim_theta()), rng)?;
    Ok(ControlledDraws { samples: rows_from_flow(problem, &out.samples), failed: out.failed.len(), simulator_calls: out.simulator_calls })
}

#[derive(Clone, Debug)]
pub struct McmcRun {
    pub chains: Chains,
    pub warmup_secs: f64,
    pub sampling_secs: f64,
    /// Minimum over coordinates.
    pub ess: f64,
}

impl McmcRun {
    /// `n` draws spread evenly over the post-warmup steps, cycling through
    /// the walkers, in raw parameter space.
    pub fn draws(&self, problem: &Problem, n: usize) -> Vec<Vec<f64>> {
        let steps = self.chains.samples.len();
        let walkers = self.chains.n_walkers;
        if steps == 0 || walkers == 0 {
            return Vec::new();
        }
        (0..n).map(|i| problem.mcmc_to_theta(&self.chains.samples[i * steps / n][i % walkers])).collect()
    }
}

/// Warmup and sampling are timed separately.
pub fn run_mcmc(problem: &Problem, x: &[f64], cfg: &McmcConfig, rng: &mut ChaCha8Rng) -> Result<McmcRun, HarnessError> {
    let lp = problem
        .log_posterior(x)
        .ok_or_else(|| HarnessError::Config(format!("task `{}` has no tractable likelihood", problem.name())))?;
    let walkers = cfg.walkers.unwrap_or_else(|| default_walkers(problem.mcmc_dim()));
    let ens = Ensemble::from_sampler(walkers, &mut |r| problem.mcmc_init(r), &*lp, rng)?;
    let t0 = Instant::now();
    let warm = AiesConfig { n_steps: 0, ..cfg.aies.clone() };
    let (_, ens) = aies_run(&*lp, ens, &warm, rng)?;
    let warmup_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (chains, _) = aies_run(&*lp, ens, &AiesConfig { warmup: 0, ..cfg.aies.clone() }, rng)?;
    let sampling_secs = t1.elapsed().as_secs_f64();
    let ess = chains.ess().into_iter().fold(f64::INFINITY, f64::min);
    Ok(McmcRun { chains, warmup_secs, sampling_secs, ess })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub samples: Vec<Vec<f64>>,
    pub method: String,
    pub seconds: f64,
}

pub fn reference_posterior(
    problem: &Problem,
    x: &[f64],
    n: usize,
    kind: ReferenceKind,
    mcmc: &McmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Reference, HarnessError> {
    let t0 = Instant::now();
    if kind != ReferenceKind::Mcmc {
        if let Some(samples) = problem.analytic_posterior(x, n, rng) {
            return Ok(Reference { samples, method: "analytic".into(), seconds: t0.elapsed().as_secs_f64() });
        }
        if kind == ReferenceKind::Analytic {
            return Err(HarnessError::Config(format!("no closed-form posterior for `{}`", problem.name())));
        }
    }
    let run = run_mcmc(problem, x, mcmc, rng)?;
    Ok(Reference { samples: run.draws(problem, n), method: "aies".into(), seconds: t0.elapsed().as_secs_f64() })
}
