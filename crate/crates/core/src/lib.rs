//! Flow-matching posterior estimation with simulator feedback.

pub mod ad;
pub mod control;
pub mod flow;
pub mod harness;
pub mod lens;
pub mod mcmc;
pub mod metrics;
pub mod rng;
pub mod tasks;

pub use ad::{AdError, Network, NetworkSpec, Tensor};
