//! Flow-matching training loop and posterior sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{clip_grad_norm, AdamConfig, Graph, NodeId, Tensor};
use crate::rng::stream;

use super::integrate::{integrate, Conditioned};
use super::model::{ModelOptimizer, Parameterization, VelocityModel, X_PREDICTION_MAX_TRAIN_T};
use super::path::{one_step_estimate, sample_time, PathConfig, PathKind};
use super::source::{normal_vec, Source};
use super::FlowError;

/// Paired draws (θ, x) in flow space, one row each.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub theta: Tensor,
    pub x: Tensor,
}

impl TrainingSet {
    pub fn new(theta: Tensor, x: Tensor) -> Result<Self, FlowError> {
        if theta.rows() != x.rows() {
            return Err(FlowError::Shape(format!("{} parameter rows vs {} observations", theta.rows(), x.rows())));
        }
        if theta.rows() == 0 {
            return Err(FlowError::Shape("empty training set".into()));
        }
        Ok(Self { theta, x })
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leading rows for training, trailing `fraction` for validation.
    pub fn split(&self, fraction: f64) -> (TrainingSet, Option<TrainingSet>) {
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return (self.clone(), None);
        }
        let n_train = self.len() - n_val;
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..self.len()).collect();
        let take = |idx: &[usize]| TrainingSet { theta: self.theta.gather_rows(idx), x: self.x.gather_rows(idx) };
        (take(&head), Some(take(&tail)))
    }
}

fn default_validation_fraction() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_sc_probability() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub clip_norm: Option<f32>,
    /// Chance per step that a self-conditioned model sees its own estimate.
    #[serde(default = "default_sc_probability")]
    pub self_condition_probability: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_loss\n");
        for p in &self.curve {
            let val = p.val_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", p.step, p.train_loss, val));
        }
        s
    }
}

/// Optimizer state plus the step counter; enough to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: ModelOptimizer,
    initial_val: Option<f64>,
}

impl TrainState {
    pub fn new(model: &VelocityModel, cfg: &TrainConfig) -> Self {
        Self { step: 0, optimizer: ModelOptimizer::new(model, cfg.adam), initial_val: None }
    }

    /// Continues from a saved optimizer; the step counter follows its count.
    pub fn resume(optimizer: ModelOptimizer) -> Self {
        Self { step: optimizer.step_count() as usize, optimizer, initial_val: None }
    }
}

/// A batch of path samples ready for the network.
pub struct PathBatch {
    pub t: Vec<f32>,
    pub theta_t: Tensor,
    pub u_target: Tensor,
    pub x: Tensor,
    /// Loss weights (x-prediction only).
    pub weights: Option<Vec<f32>>,
}

/// Draws times, noise and (for independent coupling) source points for the
/// given rows and forms the path samples.
pub fn path_batch(
    model: &VelocityModel,
    data: &TrainingSet,
    rows: &[usize],
    path: &PathConfig,
    source: &dyn Source,
    rng: &mut ChaCha8Rng,
) -> Result<PathBatch, FlowError> {
    let d = model.dim_theta();
    let n = rows.len();
    let xpred = model.config().parameterization == Parameterization::XPrediction;
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let mut ti = sample_time(path.alpha, u)?;
        if xpred {
            ti = ti.min(X_PREDICTION_MAX_TRAIN_T);
        }
        t.push(ti);
    }
    let theta0 = match path.kind {
        PathKind::IndependentCoupling => Some(source.sample(n, rng)),
        PathKind::ConditionalOt => None,
    };
    let z = normal_vec(n * d, rng);
    let mut theta_t = Vec::with_capacity(n * d);
    let mut u_target = Vec::with_capacity(n * d);
    let k = 1.0 - path.sigma_min;
    for (r, &row) in rows.iter().enumerate() {
        let th1 = data.theta.row(row);
        let ti = t[r];
        for i in 0..d {
            let (a, zi) = (th1[i] as f64, z[r * d + i]);
            match &theta0 {
                None => {
                    let scale = 1.0 - k * ti;
                    let x = ti * a + scale * zi;
                    theta_t.push(x as f32);
                    u_target.push(((a - k * x) / scale) as f32);
                }
                Some(th0) => {
                    let b = th0.row(r)[i] as f64;
                    theta_t.push((ti * a + (1.0 - ti) * b + path.sigma * zi) as f32);
                    u_target.push((a - b) as f32);
                }
            }
        }
    }
    Ok(PathBatch {
        weights: xpred.then(|| t.iter().map(|&ti| (1.0 / (1.0 - ti)) as f32).collect()),
        t: t.into_iter().map(|v| v as f32).collect(),
        theta_t: Tensor::matrix(n, d, theta_t)?,
        u_target: Tensor::matrix(n, d, u_target)?,
        x: data.x.gather_rows(rows),
    })
}

/// Records the CFM loss of a batch; returns the loss node.
pub fn record_loss(
    model: &VelocityModel,
    g: &mut Graph,
    batch: &PathBatch,
    slot: Option<Tensor>,
    trainable: bool,
) -> Result<NodeId, FlowError> {
    let th = g.constant(batch.theta_t.clone());
    let x = g.constant(batch.x.clone());
    let f = model.record_features(g, x, trainable)?;
    let s = slot.map(|s| g.constant(s));
    let v = model.record_velocity(g, &batch.t, th, f, s, trainable)?;
    Ok(g.squared_error(v, batch.u_target.clone(), batch.weights.clone())?)
}

/// Self-conditioning slot: zeros, or with probability p the one-step estimate
/// from a stop-gradient pass with an empty slot.
fn self_condition_slot(model: &VelocityModel, batch: &PathBatch, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor, FlowError> {
    let (n, d) = (batch.t.len(), model.dim_theta());
    let zeros = Tensor::zeros(&[n, d]);
    let s: f64 = rng.random();
    if s <= 1.0 - p {
        return Ok(zeros);
    }
    let mut g = Graph::new();
    let th = g.constant(batch.theta_t.clone());
    let x = g.constant(batch.x.clone());
    let f = model.record_features(&mut g, x, false)?;
    let z = g.constant(zeros);
    let v = model.record_velocity(&mut g, &batch.t, th, f, Some(z), false)?;
    let v = g.stop_grad(v);
    let v = g.value(v);
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let th: Vec<f64> = batch.theta_t.row(r).iter().map(|&a| a as f64).collect();
        let vr: Vec<f64> = v.row(r).iter().map(|&a| a as f64).collect();
        out.extend(one_step_estimate(&th, batch.t[r] as f64, &vr).into_iter().map(|a| a as f32));
    }
    Ok(Tensor::matrix(n, d, out)?)
}

/// Mean CFM loss on a fixed set of path draws.
pub fn evaluate_loss(model: &VelocityModel, batches: &[PathBatch]) -> Result<f64, FlowError> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for b in batches {
        let mut g = Graph::new();
        let slot = model.self_conditioning().then(|| Tensor::zeros(&[b.t.len(), model.dim_theta()]));
        let l = record_loss(model, &mut g, b, slot, false)?;
        total += g.value(l).data()[0] as f64 * b.t.len() as f64;
        rows += b.t.len();
    }
    Ok(total / rows.max(1) as f64)
}

/// Runs steps `state.step .. until` of conditional flow matching. Each step
/// draws from its own RNG stream, so a resumed run repeats an uninterrupted one.
pub fn train_flow(
    model: &mut VelocityModel,
    data: &TrainingSet,
    cfg: &TrainConfig,
    source: &dyn Source,
    state: &mut TrainState,
    until: usize,
) -> Result<TrainReport, FlowError> {
    cfg.path.validate()?;
    if cfg.batch_size == 0 {
        return Err(FlowError::Config("batch size must be positive".into()));
    }
    let (train, val) = data.split(cfg.validation_fraction);
    let val_batches = match &val {
        Some(v) => {
            let mut rng = stream(cfg.seed, "flow-val", 0);
            let idx: Vec<usize> = (0..v.len().min(2048)).collect();
            idx.chunks(512)
                .map(|c| path_batch(model, v, c, &cfg.path, source, &mut rng))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => Vec::new(),
    };
    if state.initial_val.is_none() && !val_batches.is_empty() {
        state.initial_val = Some(evaluate_loss(model, &val_batches)?);
    }
    let mut report = TrainReport::default();
    let mut window = 0.0;
    let mut window_n = 0usize;
    while state.step < until {
        let step = state.step;
        let mut rng = stream(cfg.seed, "flow-step", step as u64);
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let batch = path_batch(model, &train, &rows, &cfg.path, source, &mut rng)?;
        let slot = if model.self_conditioning() {
            let mut sc_rng = stream(cfg.seed, "flow-selfcond", step as u64);
            Some(self_condition_slot(model, &batch, cfg.self_condition_probability, &mut sc_rng)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let loss = record_loss(model, &mut g, &batch, slot, true)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(FlowError::Diverged { step, loss: value });
        }
        let grads = g.backward(loss, Tensor::scalar(1.0))?;
        let mut gm = grads.for_store(model.mlp().params());
        let mut ge = model.encoder().map(|e| grads.for_store(e.params()));
        drop(g);
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut gm, c);
            if let Some(ge) = &mut ge {
                clip_grad_norm(ge, c);
            }
        }
        let (mlp, enc) = model.networks_mut();
        state.optimizer.mlp.step(mlp.params_mut(), &gm)?;
        if let (Some(opt), Some(net), Some(ge)) = (&mut state.optimizer.encoder, enc, &ge) {
            opt.step(net.params_mut(), ge)?;
        }
        report.losses.push(value);
        window += value;
        window_n += 1;
        state.step += 1;
        if state.step % cfg.eval_every.max(1) == 0 || state.step == until {
            let val_loss = if val_batches.is_empty() { None } else { Some(evaluate_loss(model, &val_batches)?) };
            if let (Some(v), Some(v0)) = (val_loss, state.initial_val) {
                if !v.is_finite() || v > 10.0 * v0 {
                    return Err(FlowError::Diverged { step: state.step, loss: v });
                }
            }
            report.curve.push(CurvePoint { step: state.step, train_loss: window / window_n as f64, val_loss });
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(report)
}

/// Convenience: fresh optimizer, all configured steps.
pub fn train(model: &mut VelocityModel, data: &TrainingSet, cfg: &TrainConfig, source: &dyn Source) -> Result<TrainReport, FlowError> {
    let mut state = TrainState::new(model, cfg);
    train_flow(model, data, cfg, source, &mut state, cfg.steps)
}

/// `n` posterior draws for one observation by Euler integration from the
/// source. Self-conditioned models start with an empty slot and then see
/// the previous step's one-step estimate.
pub fn sample_posterior(
    model: &VelocityModel,
    x_o: &[f32],
    n: usize,
    n_steps: usize,
    source: &dyn Source,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, FlowError> {
    let cond = Conditioned::new(model, x_o)?;
    let feats = cond.features(n);
    let theta0 = source.sample(n, rng);
    let mut slot = model.self_conditioning().then(|| Tensor::zeros(&[n, model.dim_theta()]));
    integrate(
        |_, t, th| {
            let v = model.velocity(t, th, &feats, slot.as_ref())?;
            if let Some(s) = &mut slot {
                for ((o, &x), &dv) in s.data_mut().iter_mut().zip(th.data()).zip(v.data()) {
                    *o = x + (1.0 - t as f32) * dv;
                }
            }
            Ok(v)
        },
        theta0,
        n_steps,
    )
}
