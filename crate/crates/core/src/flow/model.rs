//! The conditional velocity network v(t, θ_t, x_o).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ad::{Activation, AdamConfig, AdamState, Checkpoint, Graph, Network, NetworkSpec, NodeId, Tensor};

use super::FlowError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// The network outputs the velocity directly.
    #[default]
    Velocity,
    /// The network outputs a denoised estimate x̂1, turned into (x̂1 − θ_t)/(1−t).
    XPrediction,
}

/// Strided conv feature extractor for image observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels_in: usize,
    pub size: usize,
    pub blocks: usize,
    pub channels: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub features: usize,
}

fn default_groups() -> usize {
    4
}

fn default_activation() -> Activation {
    Activation::Elu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Residual block widths; a dense projection is inserted on width changes.
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Sinusoidal embedding width for per-block gating; 0 feeds raw t only.
    #[serde(default)]
    pub time_embedding_dim: usize,
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// Adds a θ-sized input slot for the model's own one-step estimate.
    #[serde(default)]
    pub self_conditioning: bool,
}

impl ModelConfig {
    pub fn mlp(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            activation: Activation::Elu,
            time_embedding_dim: 0,
            encoder: None,
            parameterization: Parameterization::Velocity,
            self_conditioning: false,
        }
    }
}

/// Training clamps t here in x-prediction mode, where 1/(1−t) appears twice.
pub const X_PREDICTION_MAX_TRAIN_T: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct VelocityModel {
    config: ModelConfig,
    dim_theta: usize,
    dim_obs: usize,
    mlp: Network,
    encoder: Option<Network>,
}

impl VelocityModel {
    pub fn new(config: ModelConfig, dim_theta: usize, dim_obs: usize, seed: u64) -> Result<Self, FlowError> {
        if config.widths.is_empty() {
            return Err(FlowError::Config("at least one residual block is required".into()));
        }
        let encoder = match &config.encoder {
            Some(e) => {
                if e.channels_in * e.size * e.size != dim_obs {
                    return Err(FlowError::Config(format!(
                        "encoder expects {}x{}x{} images, observation has {dim_obs} values",
                        e.channels_in, e.size, e.size
                    )));
                }
                let spec = NetworkSpec::conv_encoder(e.channels_in, e.size, e.blocks, e.channels, e.groups, e.features);
                Some(Network::build(spec, seed.wrapping_add(0x9e37_79b9))?)
            }
            None => None,
        };
        let feat = encoder.as_ref().map_or(dim_obs, |e| e.output_dim());
        let input = 1 + dim_theta + feat + if config.self_conditioning { dim_theta } else { 0 };
        let spec = NetworkSpec::residual_mlp(input, &config.widths, dim_theta, config.activation, config.time_embedding_dim, false);
        let mlp = Network::build(spec, seed)?;
        Ok(Self { config, dim_theta, dim_obs, mlp, encoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.as_ref().map_or(self.dim_obs, |e| e.output_dim())
    }

    pub fn self_conditioning(&self) -> bool {
        self.config.self_conditioning
    }

    pub fn mlp(&self) -> &Network {
        &self.mlp
    }

    pub fn encoder(&self) -> Option<&Network> {
        self.encoder.as_ref()
    }

    pub fn networks_mut(&mut self) -> (&mut Network, Option<&mut Network>) {
        (&mut self.mlp, self.encoder.as_mut())
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.encoder.as_ref().map_or(0, |e| e.param_count())
    }

    /// SHA-256 over all parameters; unchanged iff no parameter bit moved.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mlp.params().checksum());
        if let Some(e) = &self.encoder {
            h.update(e.params().checksum());
        }
        crate::ad::hex(&h.finalize())
    }

    /// Observation features: encoder output for images, the raw row otherwise.
    pub fn record_features(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId, FlowError> {
        Ok(match &self.encoder {
            Some(e) => e.forward(g, x, None, trainable)?,
            None => x,
        })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, FlowError> {
        Ok(match &self.encoder {
            Some(e) => e.predict(x, None)?,
            None => x.clone(),
        })
    }

    /// Records the velocity for a batch. `slot` is required iff the model
    /// self-conditions (pass zeros for an empty slot).
    pub fn record_velocity(
        &self,
        g: &mut Graph,
        t: &[f32],
        theta: NodeId,
        feats: NodeId,
        slot: Option<NodeId>,
        trainable: bool,
    ) -> Result<NodeId, FlowError> {
        let batch = t.len();
        let tcol = g.constant(Tensor::matrix(batch, 1, t.to_vec())?);
        let mut parts = vec![tcol, theta];
        if self.feature_dim() > 0 {
            parts.push(feats);
        }
        match (self.config.self_conditioning, slot) {
            (true, Some(s)) => parts.push(s),
            (false, None) => {}
            (true, None) => return Err(FlowError::Shape("self-conditioned model needs a slot input".into())),
            (false, Some(_)) => return Err(FlowError::Shape("model has no self-conditioning slot".into())),
        }
        let input = g.concat(&parts)?;
        let out = self.mlp.forward(g, input, Some(t), trainable)?;
        Ok(match self.config.parameterization {
            Parameterization::Velocity => out,
            Parameterization::XPrediction => {
                let diff = g.sub(out, theta)?;
                let inv = t.iter().map(|&ti| 1.0 / (1.0 - ti)).collect();
                g.scale_rows(diff, inv)?
            }
        })
    }

    /// Velocity at a common time for a batch of states, without gradients.
    pub fn velocity(&self, t: f64, theta: &Tensor, feats: &Tensor, slot: Option<&Tensor>) -> Result<Tensor, FlowError> {
        if self.config.parameterization == Parameterization::XPrediction && t >= 1.0 - super::X_PREDICTION_TOL {
            return Err(FlowError::Time(t));
        }
        let mut g = Graph::new();
        let th = g.constant(theta.clone());
        let f = g.constant(feats.clone());
        let s = slot.map(|s| g.constant(s.clone()));
        let times = vec![t as f32; theta.rows()];
        let v = self.record_velocity(&mut g, &times, th, f, s, false)?;
        Ok(g.value(v).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new().with("mlp", &self.mlp);
        if let Some(e) = &self.encoder {
            ck = ck.with("encoder", e);
        }
        ck.meta.insert("model_config".into(), serde_json::to_string(&self.config).expect("serializable"));
        ck.meta.insert("dim_theta".into(), self.dim_theta.to_string());
        ck.meta.insert("dim_obs".into(), self.dim_obs.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        let field = |k: &str| ck.meta.get(k).ok_or_else(|| FlowError::Config(format!("checkpoint lacks `{k}`")));
        let config: ModelConfig =
            serde_json::from_str(field("model_config")?).map_err(|e| FlowError::Config(e.to_string()))?;
        let parse = |k: &str| -> Result<usize, FlowError> {
            field(k)?.parse().map_err(|_| FlowError::Config(format!("bad `{k}`")))
        };
        let (dim_theta, dim_obs) = (parse("dim_theta")?, parse("dim_obs")?);
        let mlp = ck.get("mlp").ok_or_else(|| FlowError::Config("checkpoint lacks the velocity network".into()))?.clone();
        let encoder = ck.get("encoder").cloned();
        if encoder.is_some() != config.encoder.is_some() {
            return Err(FlowError::Config("encoder presence disagrees with model config".into()));
        }
        let m = Self { config, dim_theta, dim_obs, mlp, encoder };
        if m.mlp.output_dim() != dim_theta {
            return Err(FlowError::Config("velocity network output does not match dim_theta".into()));
        }
        Ok(m)
    }
}

/// One Adam state per network of a model.
#[derive(Clone, Debug)]
pub struct ModelOptimizer {
    pub mlp: AdamState,
    pub encoder: Option<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &VelocityModel, config: AdamConfig) -> Self {
        Self {
            mlp: AdamState::new(model.mlp.params(), config),
            encoder: model.encoder.as_ref().map(|e| AdamState::new(e.params(), config)),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.mlp.step
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.extras.push(("adam.mlp".into(), self.mlp.export()));
        if let Some(e) = &self.encoder {
            ck.extras.push(("adam.encoder".into(), e.export()));
        }
        ck.meta.insert("adam.step".into(), self.mlp.step.to_string());
    }

    pub fn load_from(ck: &Checkpoint, model: &VelocityModel, config: AdamConfig) -> Result<Self, FlowError> {
        let step: u64 = ck
            .meta
            .get("adam.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FlowError::Config("checkpoint carries no optimizer state".into()))?;
        let mlp = AdamState::import(model.mlp.params(), config, step, ck.extra("adam.mlp").unwrap_or(&[]))?;
        let encoder = match &model.encoder {
            Some(e) => Some(AdamState::import(e.params(), config, step, ck.extra("adam.encoder").unwrap_or(&[]))?),
            None => None,
        };
        Ok(Self { mlp, encoder })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_width_follows_the_config() {
        let m = VelocityModel::new(ModelConfig::mlp(&[16, 16]), 4, 20, 0).unwrap();
        assert_eq!(m.mlp().input_dim(), 1 + 4 + 20);
        let mut cfg = ModelConfig::mlp(&[16]);
        cfg.self_conditioning = true;
        let m = VelocityModel::new(cfg, 4, 20, 0).unwrap();
        assert_eq!(m.mlp().input_dim(), 1 + 4 + 20 + 4);
        assert_eq!(m.mlp().output_dim(), 4);
    }

    #[test]
    fn encoder_reduces_images_to_features() {
        let mut cfg = ModelConfig::mlp(&[16]);
        cfg.encoder = Some(EncoderConfig { channels_in: 1, size: 16, blocks: 2, channels: 8, groups: 4, features: 5 });
        let m = VelocityModel::new(cfg, 5, 256, 1).unwrap();
        assert_eq!(m.mlp().input_dim(), 1 + 5 + 5);
        let f = m.features(&Tensor::zeros(&[3, 256])).unwrap();
        assert_eq!(f.shape(), &[3, 5]);
    }

    #[test]
    fn x_prediction_converts_to_velocity() {
        let mut cfg = ModelConfig::mlp(&[8]);
        cfg.parameterization = Parameterization::XPrediction;
        let m = VelocityModel::new(cfg.clone(), 2, 1, 3).unwrap();
        cfg.parameterization = Parameterization::Velocity;
        let raw = VelocityModel::new(cfg, 2, 1, 3).unwrap();
        let theta = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let feats = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let xhat = raw.velocity(0.6, &theta, &feats, None).unwrap();
        let v = m.velocity(0.6, &theta, &feats, None).unwrap();
        for i in 0..2 {
            let expect = (xhat.data()[i] - theta.data()[i]) / 0.4;
            assert!((v.data()[i] - expect).abs() < 1e-5);
        }
        assert!(matches!(m.velocity(1.0, &theta, &feats, None), Err(FlowError::Time(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VelocityModel::new(ModelConfig::mlp(&[8, 8]), 2, 3, 5).unwrap();
        let back = VelocityModel::from_checkpoint(&Checkpoint::from_reader(&m.to_checkpoint().to_bytes()[..]).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
    }
}
