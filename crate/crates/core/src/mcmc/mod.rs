//! Affine-invariant ensemble sampling with stretch and differential-evolution
//! moves.

mod ess;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ess::{autocorr_time, effective_sample_size};

#[derive(Debug, thiserror::Error)]
pub enum McmcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("walker {0} has a non-finite log-probability")]
    NonFinite(usize),
    #[error("ensemble collapsed: all walkers coincide")]
    Degenerate,
    #[error("no initial position with finite log-probability after {0} tries")]
    Init(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveConfig {
    pub stretch_a: f64,
    /// `None` uses 2.38/√(2d).
    pub de_gamma: Option<f64>,
    pub p_stretch: f64,
    pub p_de: f64,
    pub de_jitter: f64,
    /// Chance that a DE proposal uses γ = 1, which maps a walker from one
    /// mode onto another.
    #[serde(default = "default_mode_jump")]
    pub de_mode_jump: f64,
}

fn default_mode_jump() -> f64 {
    0.1
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self { stretch_a: 2.0, de_gamma: None, p_stretch: 0.5, p_de: 0.5, de_jitter: 1e-6, de_mode_jump: default_mode_jump() }
    }
}

impl MoveConfig {
    pub fn stretch_only() -> Self {
        Self { p_stretch: 1.0, p_de: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), McmcError> {
        if !(self.stretch_a > 1.0) {
            return Err(McmcError::Config("stretch scale must exceed 1".into()));
        }
        if self.p_stretch < 0.0 || self.p_de < 0.0 || ((self.p_stretch + self.p_de) - 1.0).abs() > 1e-12 {
            return Err(McmcError::Config("move probabilities must be non-negative and sum to 1".into()));
        }
        if matches!(self.de_gamma, Some(g) if !(g > 0.0)) || self.de_jitter < 0.0 {
            return Err(McmcError::Config("DE scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.de_mode_jump) {
            return Err(McmcError::Config("mode-jump probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn gamma(&self, dim: usize) -> f64 {
        self.de_gamma.unwrap_or_else(|| de_gamma(dim))
    }
}

pub fn de_gamma(dim: usize) -> f64 {
    2.38 / (2.0 * dim as f64).sqrt()
}

/// Inverse-CDF draw of z with density ∝ 1/√z on [1/a, a].
pub fn stretch_z(a: f64, u: f64) -> f64 {
    let s = (a - 1.0) * u + 1.0;
    s * s / a
}

/// Returns the proposal and the log Hastings factor (d−1)·ln z.
pub fn propose_stretch(walker: &[f64], other: &[f64], a: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let z = stretch_z(a, rng.random::<f64>());
    (stretch_point(walker, other, z), (walker.len() as f64 - 1.0) * z.ln())
}

fn stretch_point(walker: &[f64], other: &[f64], z: f64) -> Vec<f64> {
    walker.iter().zip(other).map(|(w, o)| o + z * (w - o)).collect()
}

/// Symmetric proposal with additive Gaussian jitter of scale `jitter`.
pub fn propose_de(walker: &[f64], wj: &[f64], wk: &[f64], gamma: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    walker
        .iter()
        .zip(wj.iter().zip(wk))
        .map(|(w, (a, b))| w + gamma * (a - b) + jitter * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub walkers: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub steps: u64,
}

impl Ensemble {
    pub fn new(walkers: Vec<Vec<f64>>, log_prob: &dyn Fn(&[f64]) -> f64) -> Result<Self, McmcError> {
        let d = walkers.first().map_or(0, Vec::len);
        if d == 0 || walkers.iter().any(|w| w.len() != d) {
            return Err(McmcError::Config("walkers must share a positive dimension".into()));
        }
        if walkers.len() < (2 * d).max(3) {
            return Err(McmcError::Config(format!("need at least max(2d, 3) walkers, got {}", walkers.len())));
        }
        let log_probs: Vec<f64> = walkers.iter().map(|w| log_prob(w)).collect();
        if let Some(i) = log_probs.iter().position(|l| !l.is_finite()) {
            return Err(McmcError::NonFinite(i));
        }
        Ok(Self { walkers, log_probs, steps: 0 })
    }

    /// Draws from `init` until each walker has a finite log-probability.
    pub fn from_sampler(
        n_walkers: usize,
        init: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
        log_prob: &dyn Fn(&[f64]) -> f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, McmcError> {
        const TRIES: usize = 1000;
        let mut walkers = Vec::with_capacity(n_walkers);
        for _ in 0..n_walkers {
            let w = (0..TRIES).map(|_| init(rng)).find(|w| log_prob(w).is_finite()).ok_or(McmcError::Init(TRIES))?;
            walkers.push(w);
        }
        Self::new(walkers, log_prob)
    }

    pub fn dim(&self) -> usize {
        self.walkers[0].len()
    }

    pub fn len(&self) -> usize {
        self.walkers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walkers.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        let first = &self.walkers[0];
        self.walkers.iter().all(|w| w == first)
    }

    /// One full step: each half-ensemble is updated against the other.
    /// Returns (accepted, proposed, stretch move used).
    pub fn step(&mut self, log_prob: &dyn Fn(&[f64]) -> f64, moves: &MoveConfig, rng: &mut ChaCha8Rng) -> (usize, usize, bool) {
        let n = self.len();
        let half = n / 2;
        let stretch = rng.random::<f64>() < moves.p_stretch;
        let gamma = moves.gamma(self.dim());
        let mut accepted = 0;
        for (lo, hi, clo, chi) in [(0, half, half, n), (half, n, 0, half)] {
            let nc = chi - clo;
            for i in lo..hi {
                let (proposal, log_factor) = if stretch {
                    let j = clo + rng.random_range(0..nc);
                    propose_stretch(&self.walkers[i], &self.walkers[j], moves.stretch_a, rng)
                } else {
                    let j = rng.random_range(0..nc);
                    let mut k = rng.random_range(0..nc - 1);
                    if k >= j {
                        k += 1;
                    }
                    let g = if moves.de_mode_jump > 0.0 && rng.random::<f64>() < moves.de_mode_jump { 1.0 } else { gamma };
                    let p = propose_de(&self.walkers[i], &self.walkers[clo + j], &self.walkers[clo + k], g, moves.de_jitter, rng);
                    (p, 0.0)
                };
                let lp = log_prob(&proposal);
                let log_u = rng.random::<f64>().ln();
                if lp.is_finite() && log_u < lp - self.log_probs[i] + log_factor {
                    self.walkers[i] = proposal;
                    self.log_probs[i] = lp;
                    accepted += 1;
                }
            }
        }
        self.steps += 1;
        (accepted, n, stretch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chains {
    pub n_walkers: usize,
    pub dim: usize,
    /// `samples[s][w]` is walker `w` after post-warmup step `s`.
    pub samples: Vec<Vec<Vec<f64>>>,
    pub acceptance: f64,
    pub stretch_acceptance: Option<f64>,
    pub de_acceptance: Option<f64>,
}

impl Chains {
    /// All draws, step-major.
    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.samples.iter().flatten().cloned().collect()
    }

    /// Trajectory of coordinate `k` for walker `w`.
    pub fn trace(&self, w: usize, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[w][k]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let flat = self.flat();
        let n = flat.len() as f64;
        (0..self.dim).map(|k| flat.iter().map(|s| s[k]).sum::<f64>() / n).collect()
    }

    /// Effective sample size per coordinate.
    pub fn ess(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| {
                let traces: Vec<Vec<f64>> = (0..self.n_walkers).map(|w| self.trace(w, k)).collect();
                effective_sample_size(&traces)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiesConfig {
    pub n_steps: usize,
    pub warmup: usize,
    pub thin: usize,
    pub moves: MoveConfig,
}

impl AiesConfig {
    /// 4000 warmup plus 4000 sampling steps.
    pub fn desk() -> Self {
        Self { n_steps: 4000, warmup: 4000, thin: 1, moves: MoveConfig::default() }
    }

    pub fn full_scale() -> Self {
        Self { warmup: 20_000, ..Self::desk() }
    }
}

/// 2·max(32, 2d).
pub fn default_walkers(dim: usize) -> usize {
    2 * (2 * dim).max(32)
}

/// Runs warmup plus `n_steps` steps, keeping every `thin`-th post-warmup state.
pub fn aies_run(
    log_prob: &dyn Fn(&[f64]) -> f64,
    mut ensemble: Ensemble,
    cfg: &AiesConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Chains, Ensemble), McmcError> {
    cfg.moves.validate()?;
    if cfg.thin == 0 {
        return Err(McmcError::Config("thin must be positive".into()));
    }
    if ensemble.is_degenerate() {
        return Err(McmcError::Degenerate);
    }
    let mut samples = Vec::with_capacity(cfg.n_steps / cfg.thin);
    let (mut acc, mut prop) = ([0usize; 2], [0usize; 2]);
    for s in 0..cfg.warmup + cfg.n_steps {
        let (a, p, stretch) = ensemble.step(log_prob, &cfg.moves, rng);
        if s >= cfg.warmup {
            let m = usize::from(!stretch);
            acc[m] += a;
            prop[m] += p;
            if (s - cfg.warmup + 1) % cfg.thin == 0 {
                samples.push(ensemble.walkers.clone());
            }
        }
    }
    if ensemble.is_degenerate() {
        return Err(McmcError::Degenerate);
    }
    let rate = |a: usize, p: usize| (p > 0).then(|| a as f64 / p as f64);
    let chains = Chains {
        n_walkers: ensemble.len(),
        dim: ensemble.dim(),
        samples,
        acceptance: rate(acc[0] + acc[1], prop[0] + prop[1]).unwrap_or(0.0),
        stretch_acceptance: rate(acc[0], prop[0]),
        de_acceptance: rate(acc[1], prop[1]),
    };
    Ok((chains, ensemble))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn z_endpoints() {
        assert!((stretch_z(2.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((stretch_z(2.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((de_gamma(2) - 1.19).abs() < 1e-12);
    }

    #[test]
    fn identity_stretch_and_flat_de() {
        let w = [1.0, -2.0];
        assert_eq!(stretch_point(&w, &[5.0, 5.0], 1.0), w.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, f) = propose_stretch(&[3.0], &[1.0], 2.0, &mut rng);
        assert_eq!(f, 0.0);
        let p = propose_de(&w, &[4.0, 4.0], &[4.0, 4.0], 1.19, 1e-6, &mut rng);
        assert!(p.iter().zip(&w).all(|(a, b)| a != b && (a - b).abs() < 1e-5));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(MoveConfig { stretch_a: 1.0, ..MoveConfig::default() }.validate().is_err());
        assert!(MoveConfig { p_de: 0.4, ..MoveConfig::default() }.validate().is_err());
        let lp = |_: &[f64]| 0.0;
        assert!(Ensemble::new(vec![vec![0.0, 0.0]; 3], &lp).is_err());
        let ens = Ensemble::new(vec![vec![0.0]; 4], &lp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(aies_run(&lp, ens, &AiesConfig::desk(), &mut rng), Err(McmcError::Degenerate)));
    }
}
