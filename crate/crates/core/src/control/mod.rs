//! Simulator feedback: control signals, the gated control network, its
//! finetuning against a frozen base flow, and controlled sampling.

pub mod finetune;
pub mod net;
pub mod signal;

use thiserror::Error;

use crate::ad::AdError;
use crate::flow::FlowError;
use crate::tasks::TaskError;

pub use finetune::{finetune_with_controls, sample_with_controls, train_self_conditioned, ControlDataset, ControlledSamples, FinetuneConfig, FinetuneReport};
pub use net::{controlled_velocity, ControlNet, ControlNetConfig};
pub use signal::{gradient_control, learned_control, learned_input, ControlSignal, ControlVariant, Counted, SignalScaling, Simulator, TaskSimulator};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("control configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("control network was trained against base {found}, this base is {expected}")]
    BaseMismatch { expected: String, found: String },
}
