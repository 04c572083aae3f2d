//! Control signals computed from a simulator run at the one-step estimate.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Network, Tensor};
use crate::flow::normal_vec;
use crate::tasks::{Standardizer, Task, TaskError};

use super::ControlError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// Cost and its parameter gradient through a differentiable simulator.
    Gradient,
    /// Encoder features of the simulator output next to the observation.
    Learned,
    /// All-zero inputs, shaped like the gradient variant (ablation).
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControlSignal {
    Gradient { cost: f64, grad: Vec<f64> },
    Learned { features: Vec<f64> },
    Zero { len: usize },
}

/// Conditioning of signal magnitudes before they reach the control network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalScaling {
    /// Gradient entries are clipped to ±clip.
    pub clip: f64,
    /// Sign-preserving log(1 + |c|) on the cost channel.
    pub log_cost: bool,
}

impl Default for SignalScaling {
    fn default() -> Self {
        Self { clip: 1e3, log_cost: true }
    }
}

impl SignalScaling {
    pub const RAW: SignalScaling = SignalScaling { clip: f64::INFINITY, log_cost: false };
}

impl ControlSignal {
    pub fn variant(&self) -> ControlVariant {
        match self {
            ControlSignal::Gradient { .. } => ControlVariant::Gradient,
            ControlSignal::Learned { .. } => ControlVariant::Learned,
            ControlSignal::Zero { .. } => ControlVariant::Zero,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ControlSignal::Gradient { grad, .. } => 1 + grad.len(),
            ControlSignal::Learned { features } => features.len(),
            ControlSignal::Zero { len } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The flat control-network input.
    pub fn payload(&self, scaling: SignalScaling) -> Vec<f64> {
        match self {
            ControlSignal::Gradient { cost, grad } => {
                let c = if scaling.log_cost { cost.signum() * cost.abs().ln_1p() } else { *cost };
                std::iter::once(c).chain(grad.iter().map(|g| g.clamp(-scaling.clip, scaling.clip))).collect()
            }
            ControlSignal::Learned { features } => features.clone(),
            ControlSignal::Zero { len } => vec![0.0; *len],
        }
    }
}

/// A simulator as the control loop sees it: parameters and observations in
/// flow coordinates, cost against a raw observation.
pub trait Simulator: Send + Sync {
    fn dim_theta(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn differentiable(&self) -> bool;

    fn sample_noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        normal_vec(self.noise_dim(), rng)
    }

    /// Simulated observation, standardized like the flow's inputs.
    fn simulate(&self, u: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError>;

    /// Cost and its gradient with respect to `u`.
    fn cost_grad(&self, u: &[f64], x_raw: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError>;
}

/// A benchmark task wrapped with its observation standardizer.
pub struct TaskSimulator<'a> {
    pub task: &'a dyn Task,
    pub standardizer: Standardizer,
}

impl Simulator for TaskSimulator<'_> {
    fn dim_theta(&self) -> usize {
        self.task.spec().dim_theta
    }
    fn dim_x(&self) -> usize {
        self.task.spec().dim_x
    }
    fn noise_dim(&self) -> usize {
        self.task.spec().noise_dim
    }
    fn differentiable(&self) -> bool {
        self.task.spec().differentiable
    }
    fn simulate(&self, u: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        let theta = self.task.prior().from_flow(u);
        Ok(self.standardizer.apply(&self.task.simulate(&theta, z)?))
    }
    fn cost_grad(&self, u: &[f64], x_raw: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        self.task.cost_grad(u, x_raw, z)
    }
}

/// Counts simulator invocations (simulate and cost_grad alike).
pub struct Counted<S> {
    pub inner: S,
    calls: AtomicU64,
}

impl<S> Counted<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<S: Simulator> Simulator for Counted<S> {
    fn dim_theta(&self) -> usize {
        self.inner.dim_theta()
    }
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn differentiable(&self) -> bool {
        self.inner.differentiable()
    }
    fn simulate(&self, u: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate(u, z)
    }
    fn cost_grad(&self, u: &[f64], x_raw: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.cost_grad(u, x_raw, z)
    }
}

pub fn gradient_control(sim: &dyn Simulator, theta_hat: &[f64], x_raw: &[f64], z: &[f64]) -> Result<ControlSignal, ControlError> {
    if !sim.differentiable() {
        return Err(ControlError::Config("gradient controls need a differentiable simulator".into()));
    }
    let (cost, grad) = sim.cost_grad(theta_hat, x_raw, z)?;
    if !cost.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(ControlError::Task(TaskError::Simulation("non-finite cost or gradient".into())));
    }
    Ok(ControlSignal::Gradient { cost, grad })
}

/// Encoder input for the learned variant: [S_z(θ̂1), x_o]. The simulator
/// output enters as a constant, so nothing flows back into θ̂1.
pub fn learned_input(sim: &dyn Simulator, theta_hat: &[f64], x_o: &[f32], z: &[f64]) -> Result<Vec<f32>, ControlError> {
    let s = sim.simulate(theta_hat, z)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::Task(TaskError::Simulation("non-finite simulator output".into())));
    }
    Ok(s.iter().map(|&v| v as f32).chain(x_o.iter().copied()).collect())
}

pub fn learned_control(encoder: &Network, sim: &dyn Simulator, theta_hat: &[f64], x_o: &[f32], z: &[f64]) -> Result<ControlSignal, ControlError> {
    let input = learned_input(sim, theta_hat, x_o, z)?;
    let n = input.len();
    let f = encoder.predict(&Tensor::matrix(1, n, input)?, None)?;
    Ok(ControlSignal::Learned { features: f.data().iter().map(|&v| v as f64).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_scaling() {
        let s = ControlSignal::Gradient { cost: -(std::f64::consts::E - 1.0), grad: vec![5e3, -2.0] };
        let p = s.payload(SignalScaling::default());
        assert!((p[0] + 1.0).abs() < 1e-12);
        assert_eq!(&p[1..], &[1e3, -2.0]);
        assert_eq!(s.payload(SignalScaling::RAW)[1], 5e3);
        assert_eq!(ControlSignal::Zero { len: 3 }.payload(SignalScaling::default()), vec![0.0; 3]);
    }
}
