use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::nn::Network;
use super::reference::forward_row;
use super::{AdError, Tensor};

/// Entry-wise relative error `|a − n| / max(|a|, |n|, τ)` where the floor
/// `τ = 1e-3 · max|n|` keeps vanishing entries from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares backward() parameter gradients against central differences of an
/// independent f64 forward. The scalar probed is `Σ r ⊙ output` with a fixed
/// pseudo-random `r`, so no output direction cancels.
pub fn gradient_check(net: &Network, input: &Tensor, times: Option<&[f32]>, eps: f64) -> Result<f64, AdError> {
    let batch = input.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj: Vec<f32> = (0..batch * net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = net.forward(&mut g, x, times, true)?;
    let grads = g.backward(y, Tensor::new(g.shape(y).to_vec(), proj.clone())?)?;
    let analytic: Vec<f64> = grads.for_store(net.params()).iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();

    let mut params: Vec<Vec<f64>> = net.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..batch).map(|r| input.row(r).iter().map(|&v| v as f64).collect()).collect();
    let spec = net.spec();
    let probe = |params: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for (r, row) in rows.iter().enumerate() {
            let out = forward_row(spec, params, row, times.map(|t| t[r] as f64));
            for (j, o) in out.iter().enumerate() {
                s += proj[r * out.len() + j] as f64 * o;
            }
        }
        s
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for ti in 0..params.len() {
        for k in 0..params[ti].len() {
            let orig = params[ti][k];
            params[ti][k] = orig + eps;
            let up = probe(&params);
            params[ti][k] = orig - eps;
            let down = probe(&params);
            params[ti][k] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}
