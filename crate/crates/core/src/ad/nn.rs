//! Network specifications, deterministic construction, and graph forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::{AdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Elu,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Vector(n) => n,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Affine map, optional activation on the output. Flattens image input.
    Dense {
        out: usize,
        #[serde(default)]
        activation: Option<Activation>,
        #[serde(default)]
        zero_init: bool,
    },
    /// `h + W2·act(W1·act(h) + b1) + b2`, width preserving.
    ResidualBlock { width: usize, activation: Activation },
    /// 3×3 convolution (padding 1), then optional group norm and activation.
    ConvBlock {
        channels: usize,
        stride: usize,
        #[serde(default)]
        groups: Option<usize>,
        #[serde(default)]
        activation: Option<Activation>,
    },
    /// Time gating `h ⊙ 2σ(W·emb(t) + b)`; zero-initialized so it starts as identity.
    GluTimeConditioning { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub output_dim: usize,
    /// Width of the sinusoidal time embedding fed to gating layers; 0 disables it.
    #[serde(default)]
    pub time_embedding_dim: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Vec(usize),
    Img(usize, usize, usize),
}

impl Shape {
    fn numel(self) -> usize {
        match self {
            Shape::Vec(n) => n,
            Shape::Img(c, h, w) => c * h * w,
        }
    }
}

impl NetworkSpec {
    /// Residual MLP: input projection, one residual block per width (with a
    /// projection whenever the width changes), optional time gating after each
    /// block, and a linear head.
    pub fn residual_mlp(
        input_dim: usize,
        widths: &[usize],
        output_dim: usize,
        activation: Activation,
        time_embedding_dim: usize,
        zero_head: bool,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cur = input_dim;
        for &w in widths {
            if w != cur {
                layers.push(LayerSpec::Dense { out: w, activation: None, zero_init: false });
                cur = w;
            }
            layers.push(LayerSpec::ResidualBlock { width: w, activation });
            if time_embedding_dim > 0 {
                layers.push(LayerSpec::GluTimeConditioning { width: w });
            }
        }
        layers.push(LayerSpec::Dense { out: output_dim, activation: None, zero_init: zero_head });
        Self { input: InputShape::Vector(input_dim), output_dim, time_embedding_dim, layers }
    }

    /// Strided convolutional feature extractor: `blocks` stride-2 conv blocks
    /// (group norm + silu), a single-channel 3×3 conv, and a dense projection.
    pub fn conv_encoder(
        channels_in: usize,
        size: usize,
        blocks: usize,
        channels: usize,
        groups: usize,
        output_dim: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for _ in 0..blocks {
            layers.push(LayerSpec::ConvBlock {
                channels,
                stride: 2,
                groups: Some(groups),
                activation: Some(Activation::Silu),
            });
        }
        layers.push(LayerSpec::ConvBlock { channels: 1, stride: 1, groups: None, activation: None });
        layers.push(LayerSpec::Dense { out: output_dim, activation: None, zero_init: false });
        Self {
            input: InputShape::Image { channels: channels_in, height: size, width: size },
            output_dim,
            time_embedding_dim: 0,
            layers,
        }
    }

    /// Checks layer compatibility and returns the shape after every layer.
    fn shapes(&self) -> Result<Vec<Shape>, AdError> {
        let mut cur = match self.input {
            InputShape::Vector(n) => Shape::Vec(n),
            InputShape::Image { channels, height, width } => Shape::Img(channels, height, width),
        };
        if cur.numel() == 0 {
            return Err(AdError::Spec("empty input".into()));
        }
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (LayerSpec::Dense { out, .. }, s) if *out > 0 => {
                    let _ = s;
                    Shape::Vec(*out)
                }
                (LayerSpec::ResidualBlock { width, .. }, Shape::Vec(n)) if *width == n => Shape::Vec(n),
                (LayerSpec::GluTimeConditioning { width }, Shape::Vec(n)) if *width == n => {
                    if self.time_embedding_dim == 0 {
                        return Err(AdError::Spec(format!("layer {i}: time gating without time embedding")));
                    }
                    Shape::Vec(n)
                }
                (LayerSpec::ConvBlock { channels, stride, groups, .. }, Shape::Img(_, h, w)) => {
                    if *channels == 0 || *stride == 0 {
                        return Err(AdError::Spec(format!("layer {i}: zero channels or stride")));
                    }
                    if let Some(g) = groups {
                        if *g == 0 || channels % g != 0 {
                            return Err(AdError::Spec(format!("layer {i}: {g} groups for {channels} channels")));
                        }
                    }
                    Shape::Img(*channels, (h - 1) / stride + 1, (w - 1) / stride + 1)
                }
                (layer, s) => {
                    return Err(AdError::Spec(format!("layer {i}: {layer:?} incompatible with input {s:?}")));
                }
            };
            out.push(cur);
        }
        if cur != Shape::Vec(self.output_dim) {
            return Err(AdError::Spec(format!("network ends in {cur:?}, declared output {}", self.output_dim)));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), AdError> {
        self.shapes().map(|_| ())
    }
}

/// Sinusoidal embedding of times in [0, 1]: `[sin(ω_k t), cos(ω_k t)]` with
/// log-spaced angular frequencies from 1 to 100.
pub fn time_embedding(times: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; times.len() * dim];
    for (r, &t) in times.iter().enumerate() {
        for k in 0..half {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let w = (frac * 100f64.ln()).exp();
            let a = w * t as f64;
            data[r * dim + k] = a.sin() as f32;
            data[r * dim + half + k] = a.cos() as f32;
        }
    }
    Tensor::new(vec![times.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
enum LayerParams {
    Dense { w: usize, b: usize },
    Residual { w1: usize, b1: usize, w2: usize, b2: usize },
    Conv { w: usize, b: usize, norm: Option<(usize, usize)> },
    Glu { w: usize, b: usize },
}

/// A built network: its spec plus parameters in declaration order.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
    params: ParamStore,
    seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Network {
    /// Deterministic construction: uniform fan-in scaled weights, zero biases.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, AdError> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let fin = shapes[i];
            let lp = match layer {
                LayerSpec::Dense { out, zero_init, .. } => {
                    let n = fin.numel();
                    let wv = if *zero_init {
                        vec![0.0; n * out]
                    } else {
                        uniform(&mut rng, n * out, 1.0 / (n as f32).sqrt())
                    };
                    let w = params.push(format!("l{i}.w"), Tensor::new(vec![n, *out], wv)?);
                    let b = params.push(format!("l{i}.b"), Tensor::zeros(&[*out]));
                    LayerParams::Dense { w, b }
                }
                LayerSpec::ResidualBlock { width, .. } => {
                    let bound = 1.0 / (*width as f32).sqrt();
                    let w1 = params.push(format!("l{i}.w1"), Tensor::new(vec![*width, *width], uniform(&mut rng, width * width, bound))?);
                    let b1 = params.push(format!("l{i}.b1"), Tensor::zeros(&[*width]));
                    let w2 = params.push(format!("l{i}.w2"), Tensor::new(vec![*width, *width], uniform(&mut rng, width * width, bound))?);
                    let b2 = params.push(format!("l{i}.b2"), Tensor::zeros(&[*width]));
                    LayerParams::Residual { w1, b1, w2, b2 }
                }
                LayerSpec::ConvBlock { channels, groups, .. } => {
                    let cin = match fin {
                        Shape::Img(c, _, _) => c,
                        Shape::Vec(_) => unreachable!("validated"),
                    };
                    let fan = cin * 9;
                    let w = params.push(
                        format!("l{i}.w"),
                        Tensor::new(vec![*channels, cin, 3, 3], uniform(&mut rng, channels * fan, 1.0 / (fan as f32).sqrt()))?,
                    );
                    let b = params.push(format!("l{i}.b"), Tensor::zeros(&[*channels]));
                    let norm = groups.map(|_| {
                        let g = params.push(format!("l{i}.gamma"), Tensor::full(&[*channels], 1.0));
                        let be = params.push(format!("l{i}.beta"), Tensor::zeros(&[*channels]));
                        (g, be)
                    });
                    LayerParams::Conv { w, b, norm }
                }
                LayerSpec::GluTimeConditioning { width } => {
                    let w = params.push(format!("l{i}.wg"), Tensor::zeros(&[spec.time_embedding_dim, *width]));
                    let b = params.push(format!("l{i}.bg"), Tensor::zeros(&[*width]));
                    LayerParams::Glu { w, b }
                }
            };
            layers.push(lp);
        }
        Ok(Self { spec, layers, params, seed })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input.numel()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn act(g: &mut Graph, x: NodeId, a: Activation) -> NodeId {
        match a {
            Activation::Elu => g.elu(x),
            Activation::Silu => g.silu(x),
        }
    }

    /// Records the forward pass. `x` is `[B, ..input shape]`; `times` must be
    /// given (one per row) when the spec uses a time embedding.
    pub fn forward(&self, g: &mut Graph, x: NodeId, times: Option<&[f32]>, trainable: bool) -> Result<NodeId, AdError> {
        let batch = g.value(x).rows();
        if g.value(x).row_len() != self.input_dim() {
            return Err(AdError::Shape(format!(
                "network expects {} inputs per row, got {}",
                self.input_dim(),
                g.value(x).row_len()
            )));
        }
        let mut h = x;
        if let InputShape::Image { channels, height, width } = self.spec.input {
            if g.shape(x).len() != 4 {
                h = g.reshape(x, vec![batch, channels, height, width])?;
            }
        }
        let emb = if self.spec.time_embedding_dim > 0 {
            let t = times.ok_or_else(|| AdError::Shape("time-conditioned network needs times".into()))?;
            if t.len() != batch {
                return Err(AdError::Shape("one time per row required".into()));
            }
            Some(g.constant(time_embedding(t, self.spec.time_embedding_dim)))
        } else {
            None
        };
        let p = &self.params;
        for (spec, lp) in self.spec.layers.iter().zip(&self.layers) {
            h = match (spec, lp) {
                (LayerSpec::Dense { activation, .. }, LayerParams::Dense { w, b }) => {
                    let w = g.param(p, *w, trainable);
                    let b = g.param(p, *b, trainable);
                    let y = g.linear(h, w, Some(b))?;
                    match activation {
                        Some(a) => Self::act(g, y, *a),
                        None => y,
                    }
                }
                (LayerSpec::ResidualBlock { activation, .. }, LayerParams::Residual { w1, b1, w2, b2 }) => {
                    let a0 = Self::act(g, h, *activation);
                    let w1 = g.param(p, *w1, trainable);
                    let b1 = g.param(p, *b1, trainable);
                    let z1 = g.linear(a0, w1, Some(b1))?;
                    let a1 = Self::act(g, z1, *activation);
                    let w2 = g.param(p, *w2, trainable);
                    let b2 = g.param(p, *b2, trainable);
                    let z2 = g.linear(a1, w2, Some(b2))?;
                    g.add(h, z2)?
                }
                (LayerSpec::ConvBlock { stride, groups, activation, .. }, LayerParams::Conv { w, b, norm }) => {
                    let w = g.param(p, *w, trainable);
                    let b = g.param(p, *b, trainable);
                    let mut y = g.conv2d(h, w, Some(b), *stride, 1)?;
                    if let (Some(groups), Some((gam, bet))) = (groups, norm) {
                        let gam = g.param(p, *gam, trainable);
                        let bet = g.param(p, *bet, trainable);
                        y = g.group_norm(y, gam, bet, *groups)?;
                    }
                    match activation {
                        Some(a) => Self::act(g, y, *a),
                        None => y,
                    }
                }
                (LayerSpec::GluTimeConditioning { .. }, LayerParams::Glu { w, b }) => {
                    let e = emb.expect("validated");
                    let w = g.param(p, *w, trainable);
                    let b = g.param(p, *b, trainable);
                    let z = g.linear(e, w, Some(b))?;
                    let s = g.sigmoid(z);
                    let gate = g.scale(s, 2.0);
                    g.mul(h, gate)?
                }
                _ => unreachable!("layer params built from spec"),
            };
        }
        g.check_finite()?;
        Ok(h)
    }

    /// Forward without keeping the graph.
    pub fn predict(&self, x: &Tensor, times: Option<&[f32]>) -> Result<Tensor, AdError> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = self.forward(&mut g, xi, times, false)?;
        Ok(g.value(y).clone())
    }

    /// Forward that keeps the recording for a later backward sweep.
    pub fn forward_recorded(&self, x: &Tensor, times: Option<&[f32]>) -> Result<(Tensor, Graph, NodeId), AdError> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = self.forward(&mut g, xi, times, true)?;
        Ok((g.value(y).clone(), g, y))
    }
}
