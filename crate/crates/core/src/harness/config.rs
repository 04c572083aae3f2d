//! Experiment configuration and bundled profiles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::ad::AdamConfig;
use crate::control::{ControlNetConfig, ControlVariant, FinetuneConfig};
use crate::flow::{EncoderConfig, ModelConfig, Parameterization, PathConfig, TrainConfig};
use crate::lens::{Instrument, LensPrior};
use crate::mcmc::{AiesConfig, MoveConfig};
use crate::metrics::C2stConfig;
use crate::tasks::TaskConstants;

pub const PROFILES: [&str; 7] = ["toy", "tm-small", "lv-control", "lens-64", "full-scale-tm", "full-scale-lv", "full-scale-lens"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    /// Generation aborts when more than this share of simulations fail.
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_failure_rate() -> f64 {
    0.01
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LensSetup {
    #[serde(default)]
    pub instrument: Instrument,
    #[serde(default)]
    pub prior: LensPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSetup {
    pub net: ControlNetConfig,
    pub finetune: FinetuneConfig,
    /// Rows of the training set used for finetuning; all when absent.
    #[serde(default)]
    pub n_data: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub euler_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// Closed form where the task has one, AIES otherwise.
    Auto,
    Analytic,
    Mcmc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_observations: usize,
    #[serde(default)]
    pub c2st: C2stConfig,
    #[serde(default)]
    pub mmd_bandwidth: Option<f64>,
    #[serde(default = "default_reference")]
    pub reference: ReferenceKind,
    /// Posterior draws per system for the lens χ² average.
    #[serde(default = "default_chi2_samples")]
    pub chi2_samples: usize,
}

fn default_reference() -> ReferenceKind {
    ReferenceKind::Auto
}

fn default_chi2_samples() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbcConfig {
    pub n_problems: usize,
    /// Posterior draws per problem (L).
    pub n_samples: usize,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Defaults to 2·max(32, 2d).
    #[serde(default)]
    pub walkers: Option<usize>,
    pub aies: AiesConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Benchmark task name or `lens`.
    pub task: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub constants: TaskConstants,
    #[serde(default)]
    pub lens: LensSetup,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Absent means no controls.
    #[serde(default)]
    pub control: Option<ControlSetup>,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub sbc: SbcConfig,
    pub mcmc: McmcConfig,
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-task optimizer and network defaults: (time exponent α, batch size,
/// learning rate, residual block widths).
pub fn task_defaults(task: &str) -> Option<(f64, usize, f32, Vec<usize>)> {
    let ramp = [32, 64, 128, 256];
    let tail = [256, 128, 64, 32];
    let widths = |mid: &[usize]| -> Vec<usize> { ramp.iter().chain(mid).chain(&tail).copied().collect() };
    match task {
        "lotka-volterra" | "lv" => Some((1.0, 32, 1e-3, widths(&[512; 5]))),
        "slcp" => Some((-0.5, 256, 5e-4, widths(&[512; 5]))),
        "sir" => Some((4.0, 256, 5e-4, widths(&[512; 7]))),
        "two-moons" | "tm" => {
            let w: Vec<usize> = [32, 64, 128, 256, 512, 1024, 1024, 1024, 512, 128, 64, 32].to_vec();
            Some((4.0, 64, 2e-4, w))
        }
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.task != "lens" && !crate::tasks::TASK_NAMES.contains(&self.task.as_str()) && !["lv", "tm"].contains(&self.task.as_str()) {
            return bad(&format!("unknown task `{}`", self.task));
        }
        if self.data.n_train == 0 || self.train.batch_size == 0 || self.sampling.n_samples == 0 || self.sampling.euler_steps == 0 {
            return bad("dataset size, batch size, sample count and Euler steps must be positive");
        }
        if !(0.0..1.0).contains(&self.data.max_failure_rate) {
            return bad("max_failure_rate must lie in [0, 1)");
        }
        if let Some(c) = &self.control {
            c.net.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if (self.sbc.n_samples + 1) % self.sbc.bins.max(1) != 0 {
            return bad("SBC bins must divide L + 1");
        }
        self.mcmc.aies.moves.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Hash of the configuration minus its output location, embedded in
    /// every result file.
    pub fn hash(&self) -> String {
        let keyed = Self { out_dir: None, ..self.clone() };
        short_hash(serde_json::to_string(&keyed).expect("serializable").as_bytes())
    }

    /// Hash of the settings a dataset depends on; training settings can
    /// change without invalidating generated data.
    pub fn data_hash(&self) -> String {
        let key = serde_json::json!({
            "task": self.task,
            "seed": self.seed,
            "constants": self.constants,
            "lens": (self.task == "lens").then_some(&self.lens),
            "data": self.data,
        });
        short_hash(key.to_string().as_bytes())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn control_variant(&self) -> Option<ControlVariant> {
        self.control.as_ref().map(|c| c.net.variant)
    }

    pub fn profile(name: &str) -> Result<Self, HarnessError> {
        match name {
            "toy" => Ok(toy()),
            "tm-small" => Ok(tm_small()),
            "lv-control" => Ok(lv_control()),
            "lens-64" => Ok(lens_64()),
            "full-scale-tm" => Ok(full_scale_tm()),
            "full-scale-lv" => Ok(full_scale_lv()),
            "full-scale-lens" => Ok(full_scale_lens()),
            other => Err(HarnessError::Config(format!("unknown profile `{other}`; known: {}", PROFILES.join(", ")))),
        }
    }
}

fn train_cfg(steps: usize, batch_size: usize, lr: f32, alpha: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        adam: AdamConfig::new(lr, 0.0),
        path: PathConfig { alpha, ..PathConfig::default() },
        validation_fraction: 0.05,
        eval_every: 250,
        clip_norm: Some(10.0),
        self_condition_probability: 0.5,
        seed,
    }
}

fn base(name: &str, task: &str, n_train: usize, model: ModelConfig, train: TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        task: task.into(),
        seed: 1,
        out_dir: None,
        constants: TaskConstants::default(),
        lens: LensSetup::default(),
        data: DataConfig { n_train, max_failure_rate: default_failure_rate() },
        model,
        train,
        control: None,
        sampling: SamplingConfig { n_samples: 1000, euler_steps: 64 },
        eval: EvalConfig {
            n_observations: 10,
            c2st: C2stConfig::default(),
            mmd_bandwidth: None,
            reference: ReferenceKind::Auto,
            chi2_samples: default_chi2_samples(),
        },
        sbc: SbcConfig { n_problems: 200, n_samples: 99, bins: 20 },
        mcmc: McmcConfig { walkers: None, aies: AiesConfig::desk() },
    }
}

fn half(widths: &[usize]) -> Vec<usize> {
    widths.iter().map(|w| (w / 2).max(8)).collect()
}

fn finetune_cfg(steps: usize, batch_size: usize, seed: u64) -> FinetuneConfig {
    FinetuneConfig { steps, batch_size, adam: AdamConfig::new(1e-3, 0.0), sigma_min: 1e-4, clip_norm: Some(10.0), seed }
}

/// Linear-Gaussian toy with a closed-form posterior.
fn toy() -> ExperimentConfig {
    base("toy", "linear-gaussian", 50_000, ModelConfig::mlp(&[64, 64, 64]), train_cfg(20_000, 256, 1e-3, 0.0, 11))
}

/// Two Moons at 10⁴ simulations with a half-width network.
fn tm_small() -> ExperimentConfig {
    let (alpha, batch, lr, widths) = task_defaults("two-moons").expect("known task");
    let mut cfg = base("tm-small", "two-moons", 10_000, ModelConfig::mlp(&half(&widths)), train_cfg(15_000, batch, lr, alpha, 12));
    cfg.sampling.euler_steps = 128;
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg
}

/// Lotka–Volterra with gradient controls.
fn lv_control() -> ExperimentConfig {
    let (alpha, batch, lr, _) = task_defaults("lotka-volterra").expect("known task");
    let mut model = ModelConfig::mlp(&[64, 128, 128, 64]);
    model.self_conditioning = true;
    let mut cfg = base("lv-control", "lotka-volterra", 10_000, model, train_cfg(6000, batch, lr, alpha, 13));
    cfg.control = Some(ControlSetup {
        net: ControlNetConfig::new(ControlVariant::Gradient),
        finetune: finetune_cfg(1500, 16, 14),
        n_data: Some(2000),
    });
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg.mcmc.aies = AiesConfig { n_steps: 1500, warmup: 1500, thin: 1, moves: MoveConfig::default() };
    cfg
}

fn lens_model(size: usize) -> ModelConfig {
    ModelConfig {
        widths: vec![256, 256, 256, 256],
        activation: crate::ad::Activation::Elu,
        time_embedding_dim: 16,
        encoder: Some(EncoderConfig { channels_in: 1, size, blocks: 3, channels: 16, groups: 4, features: 64 }),
        parameterization: Parameterization::Velocity,
        self_conditioning: true,
    }
}

/// 64×64 lensing with gradient controls.
fn lens_64() -> ExperimentConfig {
    let mut cfg = base("lens-64", "lens", 4000, lens_model(64), train_cfg(4000, 32, 1e-3, 0.0, 15));
    cfg.control = Some(ControlSetup {
        net: ControlNetConfig::new(ControlVariant::Gradient),
        finetune: finetune_cfg(400, 16, 16),
        n_data: Some(1000),
    });
    cfg.eval.n_observations = 50;
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg.sbc = SbcConfig { n_problems: 100, n_samples: 99, bins: 20 };
    cfg
}

fn full_scale_tm() -> ExperimentConfig {
    let (alpha, batch, lr, widths) = task_defaults("two-moons").expect("known task");
    let mut cfg = base("full-scale-tm", "two-moons", 100_000, ModelConfig::mlp(&widths), train_cfg(100_000, batch, lr, alpha, 22));
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg.mcmc.aies = AiesConfig::full_scale();
    cfg.mcmc.walkers = Some(400);
    cfg
}

fn full_scale_lv() -> ExperimentConfig {
    let (alpha, batch, lr, widths) = task_defaults("lotka-volterra").expect("known task");
    let mut model = ModelConfig::mlp(&widths);
    model.self_conditioning = true;
    let mut cfg = base("full-scale-lv", "lotka-volterra", 100_000, model, train_cfg(100_000, batch, lr, alpha, 23));
    cfg.control = Some(ControlSetup {
        net: ControlNetConfig::new(ControlVariant::Gradient),
        finetune: finetune_cfg(20_000, 16, 24),
        n_data: None,
    });
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg.mcmc.aies = AiesConfig::full_scale();
    cfg.mcmc.walkers = Some(400);
    cfg
}

fn full_scale_lens() -> ExperimentConfig {
    let mut cfg = base("full-scale-lens", "lens", 100_000, lens_model(160), train_cfg(200_000, 64, 1e-4, 0.0, 25));
    cfg.lens.instrument = Instrument::full_resolution();
    cfg.model.encoder = Some(EncoderConfig { channels_in: 1, size: 160, blocks: 4, channels: 32, groups: 4, features: 128 });
    cfg.model.widths = vec![512; 6];
    cfg.control = Some(ControlSetup {
        net: ControlNetConfig::new(ControlVariant::Gradient),
        finetune: finetune_cfg(20_000, 16, 26),
        n_data: None,
    });
    cfg.eval.n_observations = 100;
    cfg.eval.reference = ReferenceKind::Mcmc;
    cfg.mcmc.aies = AiesConfig::full_scale();
    cfg.mcmc.walkers = Some(400);
    cfg
}
