//! Experiment orchestration: configs, dataset files, pipelines and result
//! files.

mod config;
mod dataset;
mod pipeline;
mod problem;
mod stages;

use serde::{Deserialize, Serialize};

pub use config::{
    task_defaults, ControlSetup, DataConfig, EvalConfig, ExperimentConfig, LensSetup, McmcConfig, ReferenceKind, SamplingConfig,
    SbcConfig, PROFILES,
};
pub use dataset::{ColumnGroup, DatasetFile, DatasetHeader, DATASET_VERSION};
pub use pipeline::{
    control_dataset, finetune, generate, observations, reference_posterior, run_mcmc, sample_base, sample_controlled, train_base,
    training_set, ControlledDraws, Dataset, McmcRun, Observation, Reference, Trained,
};
pub use problem::{LogDensity, Problem};
pub use stages::{cmd_evaluate, cmd_finetune, cmd_generate, cmd_mcmc, cmd_sample, cmd_sbc, cmd_train, Stage};

use crate::control::ControlError;
use crate::flow::FlowError;
use crate::mcmc::McmcError;
use crate::metrics::MetricError;
use crate::tasks::TaskError;

/// `git describe` of the build, or `unknown`.
pub const GIT_DESCRIBE: &str = env!("SIMFLOW_GIT_DESCRIBE");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 configuration, 3 numerical failure, 4 missing or unusable artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Missing(_) | HarnessError::Format(_) | HarnessError::Io(_) => 4,
        }
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Simulation(m) => HarnessError::Numerical(m),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<FlowError> for HarnessError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Config(m) => HarnessError::Config(m),
            FlowError::Ad(crate::ad::AdError::Io(e)) => HarnessError::Io(e),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<crate::ad::AdError> for HarnessError {
    fn from(e: crate::ad::AdError) -> Self {
        match e {
            crate::ad::AdError::Io(e) => HarnessError::Io(e),
            other => HarnessError::Format(other.to_string()),
        }
    }
}

impl From<ControlError> for HarnessError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Config(m) => HarnessError::Config(m),
            ControlError::Task(t) => t.into(),
            ControlError::Flow(f) => f.into(),
            ControlError::Ad(a) => a.into(),
            e @ ControlError::BaseMismatch { .. } => HarnessError::Missing(e.to_string()),
        }
    }
}

impl From<McmcError> for HarnessError {
    fn from(e: McmcError) -> Self {
        match e {
            McmcError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<MetricError> for HarnessError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Ad(a) => a.into(),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

/// Provenance stamped into every result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMeta {
    pub stage: String,
    pub config_hash: String,
    pub git_describe: String,
    pub seed: u64,
}

impl ResultMeta {
    pub fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Self { stage: stage.into(), config_hash: cfg.hash(), git_describe: GIT_DESCRIBE.into(), seed: cfg.seed }
    }

    /// Comment line for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# stage={} config_hash={} git={} seed={}\n", self.stage, self.config_hash, self.git_describe, self.seed)
    }
}
