//! Plain f64 forward evaluation of a network, written without the graph.
//! Used as the finite-difference oracle for gradient checks.

use super::nn::{Activation, InputShape, LayerSpec, NetworkSpec};

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], fin: usize, fout: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..fin {
        let xi = x[i];
        for j in 0..fout {
            y[j] += xi * w[i * fout + j];
        }
    }
    y
}

/// Evaluates one input row. `params` follows the network's declaration order.
pub fn forward_row(spec: &NetworkSpec, params: &[Vec<f64>], x: &[f64], time: Option<f64>) -> Vec<f64> {
    let emb: Vec<f64> = match time {
        Some(t) if spec.time_embedding_dim > 0 => {
            // Same formula as the graph embedding, evaluated in f64.
            let dim = spec.time_embedding_dim;
            let half = dim / 2;
            let mut e = vec![0.0; dim];
            for k in 0..half {
                let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
                let w = (frac * 100f64.ln()).exp();
                e[k] = (w * t).sin();
                e[half + k] = (w * t).cos();
            }
            e
        }
        _ => Vec::new(),
    };
    let (mut c, mut h, mut w) = match spec.input {
        InputShape::Vector(n) => (n, 1, 1),
        InputShape::Image { channels, height, width } => (channels, height, width),
    };
    let mut cur = x.to_vec();
    let mut p = 0usize;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Dense { out, activation, .. } => {
                let fin = cur.len();
                let y = affine(&cur, &params[p], &params[p + 1], fin, *out);
                p += 2;
                cur = match activation {
                    Some(a) => y.into_iter().map(|v| act(*a, v)).collect(),
                    None => y,
                };
                c = *out;
                h = 1;
                w = 1;
            }
            LayerSpec::ResidualBlock { width, activation } => {
                let a0: Vec<f64> = cur.iter().map(|&v| act(*activation, v)).collect();
                let z1 = affine(&a0, &params[p], &params[p + 1], *width, *width);
                let a1: Vec<f64> = z1.into_iter().map(|v| act(*activation, v)).collect();
                let z2 = affine(&a1, &params[p + 2], &params[p + 3], *width, *width);
                p += 4;
                for (o, z) in cur.iter_mut().zip(z2) {
                    *o += z;
                }
            }
            LayerSpec::GluTimeConditioning { width } => {
                let z = affine(&emb, &params[p], &params[p + 1], emb.len(), *width);
                p += 2;
                for (o, zi) in cur.iter_mut().zip(z) {
                    *o *= 2.0 / (1.0 + (-zi).exp());
                }
            }
            LayerSpec::ConvBlock { channels, stride, groups, activation } => {
                let (wt, bias) = (&params[p], &params[p + 1]);
                p += 2;
                let ho = (h - 1) / stride + 1;
                let wo = (w - 1) / stride + 1;
                let mut y = vec![0.0; channels * ho * wo];
                for co in 0..*channels {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias[co];
                            for ci in 0..c {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let iy = (oy * stride + ki) as isize - 1;
                                        let ix = (ox * stride + kj) as isize - 1;
                                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                            acc += wt[((co * c + ci) * 3 + ki) * 3 + kj]
                                                * cur[(ci * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            y[(co * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                if let Some(g) = groups {
                    let (gam, bet) = (&params[p], &params[p + 1]);
                    p += 2;
                    let cg = channels / g;
                    let n = cg * ho * wo;
                    for gi in 0..*g {
                        let seg = gi * n..(gi + 1) * n;
                        let mean = y[seg.clone()].iter().sum::<f64>() / n as f64;
                        let var = y[seg.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                        let r = 1.0 / (var + 1e-5).sqrt();
                        for i in seg {
                            let ch = i / (ho * wo);
                            y[i] = gam[ch] * (y[i] - mean) * r + bet[ch];
                        }
                    }
                }
                if let Some(a) = activation {
                    y.iter_mut().for_each(|v| *v = act(*a, *v));
                }
                cur = y;
                c = *channels;
                h = ho;
                w = wo;
            }
        }
    }
    let _ = (c, h, w);
    cur
}
