//! Reverse-mode autodiff, network builders, optimizer, and forward-mode duals.

mod adam;
mod checkpoint;
mod dual;
mod gradcheck;
mod graph;
mod nn;
mod params;
pub mod reference;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, NetworkEntry, FORMAT_VERSION, MAGIC};
pub use dual::{gradient, Dual, Real};
pub use gradcheck::{gradient_check, max_relative_error};
pub use graph::{Gradients, Graph, NodeId};
pub use nn::{time_embedding, Activation, InputShape, LayerSpec, Network, NetworkSpec};
pub use params::{ParamKey, ParamStore};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use params::hex;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}
