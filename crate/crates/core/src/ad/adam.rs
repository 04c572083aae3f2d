use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{AdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    /// Decoupled weight decay coefficient.
    #[serde(default)]
    pub weight_decay: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Moments for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = store.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// Moments flattened as all first moments then all second moments.
    pub fn export(&self) -> Vec<f32> {
        self.first.iter().chain(&self.second).flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`AdamState::export`] for a store of the same layout.
    pub fn import(store: &ParamStore, config: AdamConfig, step: u64, flat: &[f32]) -> Result<Self, AdError> {
        let mut st = Self::new(store, config);
        if flat.len() != 2 * store.count() {
            return Err(AdError::Shape(format!("moment buffer has {} values, need {}", flat.len(), 2 * store.count())));
        }
        let mut off = 0;
        for t in st.first.iter_mut().chain(st.second.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        st.step = step;
        Ok(st)
    }

    /// Bias-corrected Adam step with decoupled weight decay:
    /// `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), AdError> {
        if grads.len() != store.len() || grads.iter().zip(store.iter()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(AdError::Shape("gradient/parameter shape mismatch".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(AdError::NonFiniteGradient);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] as f64 / bc1;
                let vhat = v[k] as f64 / bc2;
                p[k] = p[k] * decay - (c.lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
