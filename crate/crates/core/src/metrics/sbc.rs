use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::MetricError;
use crate::lens::{chi2, Instrument, LensObservation, LensScene};

/// Number of posterior probe values strictly below the true one.
pub fn rank_of(samples: &[f64], truth: f64) -> usize {
    samples.iter().filter(|&&v| v < truth).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    /// `ranks[k]` holds the ranks for coordinate `k`.
    pub ranks: Vec<Vec<usize>>,
    pub n_samples: usize,
    pub skipped: usize,
}

impl SbcResult {
    pub fn p_values(&self, bins: usize) -> Result<Vec<f64>, MetricError> {
        self.ranks.iter().map(|r| uniformity_test(r, self.n_samples, bins)).collect()
    }
}

/// Coordinate-projection ranks over `n_problems` prior draws. Problems whose
/// simulation or sampling fails are skipped and counted.
#[allow(clippy::type_complexity)]
pub fn sbc_ranks<E>(
    prior: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    simulate: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>, E>,
    posterior: &mut dyn FnMut(&[f64], usize, &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, E>,
    n_problems: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SbcResult, MetricError> {
    if n_samples < 10 || n_problems < 50 {
        return Err(MetricError::Input("SBC needs L ≥ 10 and at least 50 problems".into()));
    }
    let mut ranks: Vec<Vec<usize>> = Vec::new();
    let mut skipped = 0;
    for _ in 0..n_problems {
        let theta = prior(rng);
        if ranks.is_empty() {
            ranks = vec![Vec::with_capacity(n_problems); theta.len()];
        }
        let Ok(x) = simulate(&theta, rng) else {
            skipped += 1;
            continue;
        };
        let draws = match posterior(&x, n_samples, rng) {
            Ok(d) if d.len() == n_samples => d,
            _ => {
                skipped += 1;
                continue;
            }
        };
        for (k, r) in ranks.iter_mut().enumerate() {
            let f: Vec<f64> = draws.iter().map(|s| s[k]).collect();
            r.push(rank_of(&f, theta[k]));
        }
    }
    Ok(SbcResult { ranks, n_samples, skipped })
}

/// Chi-square goodness-of-fit p-value of ranks in {0..L} against the
/// discrete uniform, after grouping into `bins` equal bins.
pub fn uniformity_test(ranks: &[usize], l: usize, bins: usize) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::Input("no ranks".into()));
    }
    if bins < 2 || (l + 1) % bins != 0 {
        return Err(MetricError::Input(format!("{bins} bins do not divide {} rank values", l + 1)));
    }
    let width = (l + 1) / bins;
    let mut counts = vec![0.0; bins];
    for &r in ranks {
        if r > l {
            return Err(MetricError::Input(format!("rank {r} exceeds {l}")));
        }
        counts[r / width] += 1.0;
    }
    let expected = ranks.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive dof");
    Ok(dist.sf(stat))
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chi2Summary {
    pub mean: f64,
    pub per_system: Vec<f64>,
    pub failures: usize,
}

/// Mean χ² over systems and posterior samples; systems whose sampler fails
/// are excluded and counted.
pub fn avg_chi2<E>(
    observations: &[LensObservation],
    instrument: &Instrument,
    sampler: &mut dyn FnMut(usize, &LensObservation) -> Result<Vec<LensScene>, E>,
) -> Chi2Summary {
    let mut per_system = Vec::new();
    let mut failures = 0;
    for (i, obs) in observations.iter().enumerate() {
        match sampler(i, obs) {
            Ok(s) if !s.is_empty() => {
                let vals: Vec<f64> = s.iter().map(|sc| chi2(sc, obs, instrument)).filter(|v| v.is_finite()).collect();
                if vals.is_empty() {
                    failures += 1;
                } else {
                    per_system.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            _ => failures += 1,
        }
    }
    let mean = if per_system.is_empty() { f64::NAN } else { per_system.iter().sum::<f64>() / per_system.len() as f64 };
    Chi2Summary { mean, per_system, failures }
}
