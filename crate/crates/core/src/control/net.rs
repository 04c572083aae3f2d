//! The residual control network and the gated controlled field.

use serde::{Deserialize, Serialize};

use crate::ad::{Activation, Checkpoint, Graph, Network, NetworkSpec, NodeId, Tensor};
use crate::flow::VelocityModel;

use super::signal::{ControlVariant, SignalScaling};
use super::ControlError;

fn default_widths() -> Vec<usize> {
    vec![64, 64, 64, 32, 32, 32]
}
fn default_gate() -> f64 {
    0.8
}
fn default_temb() -> usize {
    16
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlNetConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_temb")]
    pub time_embedding_dim: usize,
    #[serde(default = "default_gate")]
    pub t_gate: f64,
    pub variant: ControlVariant,
    /// Encoder output size for learned controls.
    #[serde(default)]
    pub feature_dim: usize,
    /// Hidden widths of the learned-control encoder MLP.
    #[serde(default)]
    pub encoder_widths: Vec<usize>,
    #[serde(default)]
    pub scaling: SignalScaling,
    /// The base flow stays fixed; joint retraining is not supported.
    #[serde(default = "default_true")]
    pub freeze_base: bool,
}

impl ControlNetConfig {
    pub fn new(variant: ControlVariant) -> Self {
        Self {
            widths: default_widths(),
            time_embedding_dim: default_temb(),
            t_gate: default_gate(),
            variant,
            feature_dim: 0,
            encoder_widths: Vec::new(),
            scaling: SignalScaling::default(),
            freeze_base: true,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.t_gate > 0.0 && self.t_gate < 1.0) {
            return Err(ControlError::Config(format!("t_gate {} outside (0, 1)", self.t_gate)));
        }
        if !self.freeze_base {
            return Err(ControlError::Config("the base flow must stay frozen".into()));
        }
        if self.widths.is_empty() {
            return Err(ControlError::Config("control network needs at least one block".into()));
        }
        if self.variant == ControlVariant::Learned && self.feature_dim == 0 {
            return Err(ControlError::Config("learned controls need a positive feature_dim".into()));
        }
        Ok(())
    }

    pub fn payload_dim(&self, dim_theta: usize) -> usize {
        match self.variant {
            ControlVariant::Gradient | ControlVariant::Zero => 1 + dim_theta,
            ControlVariant::Learned => self.feature_dim,
        }
    }

    /// Exact gate: controls act on grid times t ≥ t_gate only.
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_gate
    }
}

/// v^C(t, v, c) with a zero-initialized head, plus the learned-control
/// encoder when configured.
#[derive(Clone, Debug)]
pub struct ControlNet {
    config: ControlNetConfig,
    dim_theta: usize,
    dim_x: usize,
    net: Network,
    encoder: Option<Network>,
}

impl ControlNet {
    pub fn new(config: ControlNetConfig, dim_theta: usize, dim_x: usize, seed: u64) -> Result<Self, ControlError> {
        config.validate()?;
        let input = dim_theta + config.payload_dim(dim_theta);
        let spec = NetworkSpec::residual_mlp(input, &config.widths, dim_theta, Activation::Elu, config.time_embedding_dim, true);
        let net = Network::build(spec, seed)?;
        let encoder = match config.variant {
            ControlVariant::Learned => {
                let widths = if config.encoder_widths.is_empty() { vec![64] } else { config.encoder_widths.clone() };
                let spec = NetworkSpec::residual_mlp(2 * dim_x, &widths, config.feature_dim, Activation::Elu, 0, false);
                Some(Network::build(spec, seed.wrapping_add(0x51ed_270b))?)
            }
            _ => None,
        };
        Ok(Self { config, dim_theta, dim_x, net, encoder })
    }

    pub fn config(&self) -> &ControlNetConfig {
        &self.config
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn encoder(&self) -> Option<&Network> {
        self.encoder.as_ref()
    }

    pub fn networks_mut(&mut self) -> (&mut Network, Option<&mut Network>) {
        (&mut self.net, self.encoder.as_mut())
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.encoder.as_ref().map_or(0, |e| e.param_count())
    }

    /// Records v^C for a batch; `payload` rows are already scaled.
    pub fn record(&self, g: &mut Graph, t: &[f32], v: NodeId, payload: NodeId, trainable: bool) -> Result<NodeId, ControlError> {
        let input = g.concat(&[v, payload])?;
        Ok(self.net.forward(g, input, Some(t), trainable)?)
    }

    /// Encoder features for rows of [S_z(θ̂1), x_o].
    pub fn record_features(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<NodeId, ControlError> {
        let enc = self.encoder.as_ref().ok_or_else(|| ControlError::Config("no learned-control encoder".into()))?;
        Ok(enc.forward(g, input, None, trainable)?)
    }

    /// Control output for a batch at a common time.
    pub fn output(&self, t: f64, v: &Tensor, payload: &Tensor) -> Result<Tensor, ControlError> {
        let mut g = Graph::new();
        let vn = g.constant(v.clone());
        let pn = g.constant(payload.clone());
        let out = self.record(&mut g, &vec![t as f32; v.rows()], vn, pn, false)?;
        Ok(g.value(out).clone())
    }

    /// Saves the networks with the hash of the base checkpoint they were
    /// trained against.
    pub fn to_checkpoint(&self, base: &VelocityModel) -> Checkpoint {
        let mut ck = Checkpoint::new().with("control", &self.net);
        if let Some(e) = &self.encoder {
            ck = ck.with("control-encoder", e);
        }
        ck.meta.insert("control_config".into(), serde_json::to_string(&self.config).expect("serializable"));
        ck.meta.insert("dim_theta".into(), self.dim_theta.to_string());
        ck.meta.insert("dim_x".into(), self.dim_x.to_string());
        ck.meta.insert("base_hash".into(), base.to_checkpoint().hash());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, base: &VelocityModel) -> Result<Self, ControlError> {
        let field = |k: &str| ck.meta.get(k).ok_or_else(|| ControlError::Config(format!("checkpoint lacks `{k}`")));
        let expected = base.to_checkpoint().hash();
        if field("base_hash")? != &expected {
            return Err(ControlError::BaseMismatch { expected, found: field("base_hash")?.clone() });
        }
        let config: ControlNetConfig =
            serde_json::from_str(field("control_config")?).map_err(|e| ControlError::Config(e.to_string()))?;
        let parse = |k: &str| -> Result<usize, ControlError> {
            field(k)?.parse().map_err(|_| ControlError::Config(format!("bad `{k}`")))
        };
        let net = ck.get("control").ok_or_else(|| ControlError::Config("checkpoint lacks the control network".into()))?.clone();
        let encoder = ck.get("control-encoder").cloned();
        Ok(Self { config, dim_theta: parse("dim_theta")?, dim_x: parse("dim_x")?, net, encoder })
    }
}

/// ṽ = v + v^C(t, v, c) for t ≥ t_gate, otherwise v itself.
pub fn controlled_velocity(v: &Tensor, payload: &Tensor, t: f64, control: &ControlNet) -> Result<Tensor, ControlError> {
    if !control.config.active(t) {
        return Ok(v.clone());
    }
    let out = control.output(t, v, payload)?;
    let mut res = v.clone();
    for (a, b) in res.data_mut().iter_mut().zip(out.data()) {
        *a += b;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_is_identity_and_gate_is_exact() {
        let c = ControlNet::new(ControlNetConfig::new(ControlVariant::Gradient), 2, 4, 1).unwrap();
        let v = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let p = Tensor::matrix(1, 3, vec![0.5, 2.0, -1.0]).unwrap();
        assert_eq!(controlled_velocity(&v, &p, 0.9, &c).unwrap(), v);
        assert_eq!(controlled_velocity(&v, &p, 0.5, &c).unwrap(), v);
        assert_eq!(c.net().input_dim(), 2 + 3);
    }

    #[test]
    fn residual_addition() {
        let mut c = ControlNet::new(ControlNetConfig::new(ControlVariant::Zero), 2, 4, 1).unwrap();
        // Set the head bias to (0.1, −0.2); every other head weight stays zero.
        let store = c.networks_mut().0.params_mut();
        let last = store.len() - 1;
        store.get_mut(last).data_mut().copy_from_slice(&[0.1, -0.2]);
        let v = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let out = controlled_velocity(&v, &Tensor::zeros(&[1, 3]), 0.9, &c).unwrap();
        assert!((out.data()[0] - 1.1).abs() < 1e-6 && (out.data()[1] - 0.8).abs() < 1e-6);
        assert_eq!(controlled_velocity(&v, &Tensor::zeros(&[1, 3]), 0.79, &c).unwrap(), v);
    }
}
