//! Conditional flow matching: paths, velocity models, training and sampling.

mod integrate;
mod model;
mod path;
mod source;
mod train;

pub use integrate::{euler_times, integrate, integrate_field, log_density, Conditioned, VelocityField};
pub use model::{EncoderConfig, ModelConfig, ModelOptimizer, Parameterization, VelocityModel, X_PREDICTION_MAX_TRAIN_T};
pub use path::{
    one_step_estimate, sample_ic_path, sample_ot_path, sample_time, velocity_from_x_prediction, PathConfig, PathKind, PathSample,
    X_PREDICTION_TOL,
};
pub use source::{normal_vec, Source, StandardNormal, LN_SQRT_2PI};
pub use train::{
    evaluate_loss, path_batch, record_loss, sample_posterior, train, train_flow, CurvePoint, PathBatch, TrainConfig, TrainReport,
    TrainState, TrainingSet,
};

use crate::ad::AdError;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("time {0} outside the admissible range")]
    Time(f64),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}
