//! Control-network finetuning against a frozen base flow, and sampling of
//! the controlled field.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{clip_grad_norm, AdamConfig, AdamState, Graph, Tensor};
use crate::flow::{integrate, normal_vec, train, FlowError, Source, TrainConfig, TrainReport, TrainingSet, VelocityModel};
use crate::rng::stream;
use crate::tasks::TaskError;

use super::net::ControlNet;
use super::signal::{gradient_control, learned_input, ControlSignal, ControlVariant, Simulator};
use super::ControlError;

/// Pairs (θ1, x_o) in flow coordinates; `x_raw` holds the observations the
/// simulator cost compares against (defaults to `x`).
#[derive(Clone, Debug)]
pub struct ControlDataset {
    pub theta: Tensor,
    pub x: Tensor,
    pub x_raw: Option<Tensor>,
}

impl ControlDataset {
    pub fn new(theta: Tensor, x: Tensor, x_raw: Option<Tensor>) -> Result<Self, ControlError> {
        if theta.rows() != x.rows() || x_raw.as_ref().is_some_and(|r| r.rows() != x.rows()) || theta.rows() == 0 {
            return Err(ControlError::Config("control dataset rows disagree or are empty".into()));
        }
        Ok(Self { theta, x, x_raw })
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw_row(&self, r: usize) -> Vec<f64> {
        self.x_raw.as_ref().unwrap_or(&self.x).row(r).iter().map(|&v| v as f64).collect()
    }
}

fn default_sigma_min() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default)]
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub simulator_calls: u64,
    /// Samples whose simulator run failed and fell back to zero signals.
    pub failures: u64,
}

/// Base velocity with per-row times. Self-conditioned bases get their own
/// one-step estimate in the slot, as during sampling.
fn base_velocity(base: &VelocityModel, t: &[f32], theta: &Tensor, feats: &Tensor) -> Result<Tensor, ControlError> {
    let eval = |slot: Option<Tensor>| -> Result<Tensor, ControlError> {
        let mut g = Graph::new();
        let th = g.constant(theta.clone());
        let f = g.constant(feats.clone());
        let s = slot.map(|s| g.constant(s));
        let v = base.record_velocity(&mut g, t, th, f, s, false)?;
        let v = g.stop_grad(v);
        Ok(g.value(v).clone())
    };
    if !base.self_conditioning() {
        return eval(None);
    }
    let v0 = eval(Some(Tensor::zeros(theta.shape())))?;
    eval(Some(one_step(theta, t, &v0)))
}

/// θ̂1 = θ_t + (1 − t)·v row-wise.
fn one_step(theta: &Tensor, t: &[f32], v: &Tensor) -> Tensor {
    let mut out = theta.clone();
    let d = theta.row_len();
    for (i, (o, dv)) in out.data_mut().iter_mut().zip(v.data()).enumerate() {
        *o += (1.0 - t[i / d]) * dv;
    }
    out
}

struct Signals {
    /// Rows of the control payload, or of the encoder input for learned controls.
    rows: Tensor,
    ok: Vec<bool>,
    calls: u64,
}

fn compute_signals(
    control: &ControlNet,
    sim: &dyn Simulator,
    theta_hat: &Tensor,
    x_flow: &Tensor,
    x_raw: &dyn Fn(usize) -> Vec<f64>,
    noise: &dyn Fn(usize) -> Vec<f64>,
) -> Result<Signals, ControlError> {
    let n = theta_hat.rows();
    let d = theta_hat.row_len();
    let cfg = control.config();
    let width = match cfg.variant {
        ControlVariant::Learned => 2 * x_flow.row_len(),
        _ => cfg.payload_dim(d),
    };
    let mut data = Vec::with_capacity(n * width);
    let mut ok = vec![true; n];
    let mut calls = 0u64;
    for r in 0..n {
        let th: Vec<f64> = theta_hat.row(r).iter().map(|&v| v as f64).collect();
        let row = match cfg.variant {
            ControlVariant::Zero => Ok(ControlSignal::Zero { len: width }.payload(cfg.scaling)),
            ControlVariant::Gradient => {
                calls += 1;
                gradient_control(sim, &th, &x_raw(r), &noise(r)).map(|s| s.payload(cfg.scaling))
            }
            ControlVariant::Learned => {
                calls += 1;
                learned_input(sim, &th, x_flow.row(r), &noise(r)).map(|v| v.into_iter().map(f64::from).collect())
            }
        };
        match row {
            Ok(p) => data.extend(p.into_iter().map(|v| v as f32)),
            Err(ControlError::Task(TaskError::Simulation(_))) => {
                ok[r] = false;
                data.extend(std::iter::repeat_n(0.0, width));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Signals { rows: Tensor::matrix(n, width, data)?, ok, calls })
}

/// Records the payload node: constants, or masked encoder features.
fn payload_node(control: &ControlNet, g: &mut Graph, s: &Signals, trainable: bool) -> Result<crate::ad::NodeId, ControlError> {
    let input = g.constant(s.rows.clone());
    if control.config().variant != ControlVariant::Learned {
        return Ok(input);
    }
    let f = control.record_features(g, input, trainable)?;
    Ok(g.scale_rows(f, s.ok.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?)
}

/// Trains the control network (and learned-control encoder) on t ~ U(t_gate, 1)
/// with the base frozen. Each step draws from its own RNG stream.
pub fn finetune_with_controls(
    base: &VelocityModel,
    control: &mut ControlNet,
    sim: &dyn Simulator,
    data: &ControlDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport, ControlError> {
    let d = base.dim_theta();
    if sim.dim_theta() != d || control.dim_theta() != d || data.theta.row_len() != d {
        return Err(ControlError::Config("parameter dimensions of base, control net, simulator and data disagree".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ControlError::Config("batch size must be positive".into()));
    }
    if control.config().variant == ControlVariant::Gradient && !sim.differentiable() {
        return Err(ControlError::Config("gradient controls need a differentiable simulator".into()));
    }
    let gate = control.config().t_gate;
    let k = 1.0 - cfg.sigma_min;
    let mut net_opt = AdamState::new(control.net().params(), cfg.adam);
    let mut enc_opt = control.encoder().map(|e| AdamState::new(e.params(), cfg.adam));
    let mut report = FinetuneReport::default();
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, "control-step", step as u64);
        let n = cfg.batch_size;
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(gate..1.0)).collect();
        let z = normal_vec(n * d, &mut rng);
        let mut theta_t = Vec::with_capacity(n * d);
        let mut target = Vec::with_capacity(n * d);
        for (r, &row) in rows.iter().enumerate() {
            let scale = 1.0 - k * t[r];
            for (i, &a) in data.theta.row(row).iter().enumerate() {
                let x = t[r] * a as f64 + scale * z[r * d + i];
                theta_t.push(x as f32);
                target.push(((a as f64 - k * x) / scale) as f32);
            }
        }
        let theta_t = Tensor::matrix(n, d, theta_t)?;
        let target = Tensor::matrix(n, d, target)?;
        let tf: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        let x = data.x.gather_rows(&rows);
        let v = base_velocity(base, &tf, &theta_t, &base.features(&x)?)?;
        let theta_hat = one_step(&theta_t, &tf, &v);
        // Fresh simulator noise per sample.
        let sim_noise: Vec<Vec<f64>> = (0..n).map(|_| sim.sample_noise(&mut rng)).collect();
        let signals = compute_signals(control, sim, &theta_hat, &x, &|r| data.raw_row(rows[r]), &|r| sim_noise[r].clone())?;
        report.simulator_calls += signals.calls;
        report.failures += signals.ok.iter().filter(|&&o| !o).count() as u64;

        let mut g = Graph::new();
        let vn = g.constant(v);
        let pn = payload_node(control, &mut g, &signals, true)?;
        let out = control.record(&mut g, &tf, vn, pn, true)?;
        let vt = g.add(vn, out)?;
        let loss = g.squared_error(vt, target, None)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(ControlError::Flow(FlowError::Diverged { step, loss: value }));
        }
        let grads = g.backward(loss, Tensor::scalar(1.0))?;
        let mut gn = grads.for_store(control.net().params());
        let mut ge = control.encoder().map(|e| grads.for_store(e.params()));
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut gn, c);
            if let Some(ge) = &mut ge {
                clip_grad_norm(ge, c);
            }
        }
        let (net, enc) = control.networks_mut();
        net_opt.step(net.params_mut(), &gn)?;
        if let (Some(opt), Some(enc), Some(ge)) = (&mut enc_opt, enc, &ge) {
            opt.step(enc.params_mut(), ge)?;
        }
        report.losses.push(value);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ControlledSamples {
    /// Rows of trajectories that finished without a simulator failure.
    pub samples: Tensor,
    /// Indices of trajectories dropped after a simulator failure.
    pub failed: Vec<usize>,
    pub simulator_calls: u64,
}

/// Euler integration of the controlled field. Each trajectory keeps one
/// simulator noise draw for all of its steps; below the gate the base field
/// is used unchanged.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_controls(
    base: &VelocityModel,
    control: &ControlNet,
    sim: &dyn Simulator,
    x_o: &[f32],
    x_raw: &[f64],
    n: usize,
    n_steps: usize,
    source: &dyn Source,
    rng: &mut ChaCha8Rng,
) -> Result<ControlledSamples, ControlError> {
    let d = base.dim_theta();
    let xm = Tensor::matrix(1, x_o.len(), x_o.to_vec())?;
    let feats = base.features(&xm)?.repeat_rows(n);
    let x_rows = xm.repeat_rows(n);
    let theta0 = source.sample(n, rng);
    let noise: Vec<Vec<f64>> = (0..n).map(|_| sim.sample_noise(rng)).collect();
    let mut slot = base.self_conditioning().then(|| Tensor::zeros(&[n, d]));
    let mut ok = vec![true; n];
    let mut calls = 0u64;
    let out = integrate(
        |_, t, th| {
            let v = base.velocity(t, th, &feats, slot.as_ref())?;
            let tf = vec![t as f32; n];
            let theta_hat = one_step(th, &tf, &v);
            if let Some(s) = &mut slot {
                *s = theta_hat.clone();
            }
            if !control.config().active(t) {
                return Ok(v);
            }
            let res = (|| -> Result<Tensor, ControlError> {
                let s = compute_signals(control, sim, &theta_hat, &x_rows, &|_| x_raw.to_vec(), &|r| noise[r].clone())?;
                calls += s.calls;
                for (o, &good) in ok.iter_mut().zip(&s.ok) {
                    *o &= good;
                }
                let mut g = Graph::new();
                let vn = g.constant(v.clone());
                let pn = payload_node(control, &mut g, &s, false)?;
                let out = control.record(&mut g, &tf, vn, pn, false)?;
                let vt = g.add(vn, out)?;
                Ok(g.value(vt).clone())
            })();
            res.map_err(|e| match e {
                ControlError::Flow(f) => f,
                other => FlowError::Config(other.to_string()),
            })
        },
        theta0,
        n_steps,
    )?;
    let keep: Vec<usize> = (0..n).filter(|&r| ok[r]).collect();
    Ok(ControlledSamples {
        samples: out.gather_rows(&keep),
        failed: (0..n).filter(|&r| !ok[r]).collect(),
        simulator_calls: calls,
    })
}

/// Flow matching where the model sees its own one-step estimate in an extra
/// input slot on a random half of the steps.
pub fn train_self_conditioned(
    model: &mut VelocityModel,
    data: &TrainingSet,
    cfg: &TrainConfig,
    source: &dyn Source,
) -> Result<TrainReport, ControlError> {
    if !model.self_conditioning() {
        return Err(ControlError::Config("model has no self-conditioning slot".into()));
    }
    Ok(train(model, data, cfg, source)?)
}
