use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_sets, MetricError, MetricReport};
use crate::ad::{Activation, AdamConfig, AdamState, Graph, LayerSpec, Network, NetworkSpec, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2stConfig {
    /// Hidden width is this times the dimension.
    pub width_factor: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seeds: u64,
    pub test_fraction: f64,
    /// Share of the training part held out for early stopping on validation loss.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        Self {
            width_factor: 10,
            epochs: 200,
            lr: 1e-3,
            batch_size: 128,
            patience: 10,
            seeds: 5,
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

fn classifier(d: usize, width: usize, seed: u64) -> Result<Network, MetricError> {
    let hidden = |_| LayerSpec::Dense { out: width, activation: Some(Activation::Elu), zero_init: false };
    let mut layers: Vec<LayerSpec> = (0..2).map(hidden).collect();
    layers.push(LayerSpec::Dense { out: 1, activation: None, zero_init: false });
    let spec = NetworkSpec { input: crate::ad::InputShape::Vector(d), output_dim: 1, time_embedding_dim: 0, layers };
    Ok(Network::build(spec, seed)?)
}

fn bce(net: &Network, x: &Tensor, y: &[f32]) -> Result<f64, MetricError> {
    let logits = net.predict(x, None)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(y)
        .map(|(&z, &l)| {
            let z = z as f64;
            z.max(0.0) - z * l as f64 + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(total / y.len() as f64)
}

fn accuracy(net: &Network, x: &Tensor, y: &[f32]) -> Result<f64, MetricError> {
    let logits = net.predict(x, None)?;
    let hits = logits.data().iter().zip(y).filter(|(&z, &l)| (z > 0.0) == (l > 0.5)).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Held-out accuracy of a classifier trained to tell `p` from `q`,
/// averaged over seeds. Equal set sizes are enforced by truncation.
pub fn c2st(p: &[Vec<f64>], q: &[Vec<f64>], cfg: &C2stConfig) -> Result<MetricReport, MetricError> {
    let d = check_sets(p, q, 200)?;
    let n = p.len().min(q.len());
    let rows: Vec<&Vec<f64>> = p[..n].iter().chain(&q[..n]).collect();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in &rows {
        for k in 0..d {
            mean[k] += r[k] / rows.len() as f64;
        }
    }
    for r in &rows {
        for k in 0..d {
            var[k] += (r[k] - mean[k]).powi(2) / rows.len() as f64;
        }
    }
    if (0..d).any(|k| rows.iter().all(|r| r[k] == rows[0][k])) || var.iter().any(|v| !(*v > 0.0)) {
        return Err(MetricError::Degenerate("a coordinate has zero variance".into()));
    }
    let data: Vec<Vec<f32>> =
        rows.iter().map(|r| (0..d).map(|k| ((r[k] - mean[k]) / var[k].sqrt()) as f32).collect()).collect();
    let labels: Vec<f32> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();

    let mut accs = Vec::new();
    for s in 0..cfg.seeds {
        let mut r = rng::stream(cfg.seed, "c2st", s);
        // balanced split: shuffle each class separately
        let mut idx_p: Vec<usize> = (0..n).collect();
        let mut idx_q: Vec<usize> = (n..2 * n).collect();
        idx_p.shuffle(&mut r);
        idx_q.shuffle(&mut r);
        let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
        let n_val = (((n - n_test) as f64) * cfg.val_fraction).round().max(1.0) as usize;
        let take = |a: usize, b: usize| -> Vec<usize> { idx_p[a..b].iter().chain(&idx_q[a..b]).copied().collect() };
        let test = take(0, n_test);
        let val = take(n_test, n_test + n_val);
        let mut train = take(n_test + n_val, n);
        let gather = |ix: &[usize]| -> Result<(Tensor, Vec<f32>), MetricError> {
            let x = Tensor::from_rows(&ix.iter().map(|&i| data[i].clone()).collect::<Vec<_>>())?;
            Ok((x, ix.iter().map(|&i| labels[i]).collect()))
        };
        let (xt, yt) = gather(&test)?;
        let (xv, yv) = gather(&val)?;

        let mut net = classifier(d, cfg.width_factor * d, rng::derive_seed(cfg.seed, "c2st-init", s))?;
        let mut opt = AdamState::new(net.params(), AdamConfig::new(cfg.lr, 0.0));
        let mut best = (f64::INFINITY, net.clone());
        let mut stale = 0;
        for _ in 0..cfg.epochs {
            train.shuffle(&mut r);
            for batch in train.chunks(cfg.batch_size) {
                let (x, y) = gather(batch)?;
                let mut g = Graph::new();
                let input = g.input(x);
                let out = net.forward(&mut g, input, None, true)?;
                let loss = g.bce_with_logits(out, y)?;
                let grads = g.backward(loss, Tensor::scalar(1.0))?;
                let grads = grads.for_store(net.params());
                opt.step(net.params_mut(), &grads)?;
            }
            let loss = bce(&net, &xv, &yv)?;
            if loss < best.0 {
                best = (loss, net.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        accs.push(accuracy(&best.1, &xt, &yt)?);
    }
    let m = accs.iter().sum::<f64>() / accs.len() as f64;
    let sd = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(MetricReport::new("c2st", m)
        .with_uncertainty(sd)
        .with_config(serde_json::json!({ "width": cfg.width_factor * d, "seeds": cfg.seeds, "samples": n })))
}
