use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simflow_core::flow::normal_vec;
use simflow_core::mcmc::*;
use simflow_core::metrics::ks_test;
use simflow_core::tasks::{make_task, phi, TaskConstants};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_lp(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

fn init(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(d, r)).collect()
}

#[test]
fn stretch_z_follows_inverse_sqrt_density() {
    let mut r = rng(0);
    let bins = 50;
    let mut counts = vec![0.0; bins];
    let n = 1_000_000;
    for _ in 0..n {
        let z = stretch_z(2.0, r.random());
        let u = (z.sqrt() * 2f64.sqrt() - 1.0).clamp(0.0, 1.0 - 1e-12);
        counts[(u * bins as f64) as usize] += 1.0;
    }
    // CDF F(z) = (√(2z) − 1) on [0.5, 2] makes the transformed draws uniform
    let e = n as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let p = ChiSquared::new((bins - 1) as f64).unwrap().sf(stat);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn gaussian_moments() {
    let mut r = rng(1);
    let ens = Ensemble::new(init(64, 2, &mut r), &normal_lp).unwrap();
    let cfg = AiesConfig { n_steps: 5000, warmup: 500, thin: 1, moves: MoveConfig::default() };
    let (chains, _) = aies_run(&normal_lp, ens, &cfg, &mut r).unwrap();
    let ess = chains.ess();
    let flat = chains.flat();
    let n = flat.len() as f64;
    for k in 0..2 {
        let m = flat.iter().map(|s| s[k]).sum::<f64>() / n;
        let v = flat.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 3.0 / ess[k].sqrt(), "mean {m} ess {}", ess[k]);
        assert!((v - 1.0).abs() < 3.0 * (2.0 / ess[k]).sqrt(), "var {v}");
    }
    assert!(chains.acceptance > 0.2 && chains.acceptance < 0.9);
    assert!(chains.stretch_acceptance.is_some() && chains.de_acceptance.is_some());
}

#[test]
fn box_support_is_respected() {
    let lp = |x: &[f64]| if x.iter().all(|v| (0.0..=1.0).contains(v)) { 0.0 } else { f64::NEG_INFINITY };
    let mut r = rng(2);
    let walkers = (0..16).map(|_| vec![r.random(), r.random(), r.random()]).collect();
    let ens = Ensemble::new(walkers, &lp).unwrap();
    let cfg = AiesConfig { n_steps: 500, warmup: 0, thin: 1, moves: MoveConfig::default() };
    let (chains, _) = aies_run(&lp, ens, &cfg, &mut r).unwrap();
    assert!(chains.flat().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn conjugate_linear_gaussian_posterior() {
    let task = make_task("linear-gaussian", &TaskConstants::default()).unwrap();
    let lg = simflow_core::tasks::LinearGaussian::new(TaskConstants::default().linear_gaussian);
    let mut r = rng(3);
    let theta = task.sample_prior(1, &mut r).remove(0);
    let x = task.simulate(&theta, &task.sample_noise(&mut r)).unwrap();
    let lp = |t: &[f64]| task.prior_log_prob(t) + task.log_likelihood(t, &x).unwrap();
    let ens = Ensemble::from_sampler(64, &mut |r| task.sample_prior(1, r).remove(0), &lp, &mut r).unwrap();
    let cfg = AiesConfig { n_steps: 3000, warmup: 500, thin: 1, moves: MoveConfig::default() };
    let (chains, _) = aies_run(&lp, ens, &cfg, &mut r).unwrap();
    let (mean, var) = lg.posterior(&x);
    let ess = chains.ess();
    let flat = chains.flat();
    let n = flat.len() as f64;
    for k in 0..mean.len() {
        let m = flat.iter().map(|s| s[k]).sum::<f64>() / n;
        let v = flat.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / n;
        assert!((m - mean[k]).abs() < 3.0 * (var / ess[k]).sqrt(), "{m} vs {}", mean[k]);
        assert!((v / var - 1.0).abs() < 3.0 * (2.0 / ess[k]).sqrt(), "{v} vs {var}");
    }
    // off-diagonal covariance vanishes
    let c01 = flat.iter().map(|s| (s[0] - mean[0]) * (s[1] - mean[1])).sum::<f64>() / n;
    assert!(c01.abs() < 3.0 * var / ess[0].min(ess[1]).sqrt());
}

#[test]
fn stretch_move_matches_normal_cdf() {
    let mut r = rng(4);
    let ens = Ensemble::new(init(64, 1, &mut r), &normal_lp).unwrap();
    let cfg = AiesConfig { n_steps: 20_000, warmup: 500, thin: 1, moves: MoveConfig::stretch_only() };
    let (chains, _) = aies_run(&normal_lp, ens, &cfg, &mut r).unwrap();
    let tau = autocorr_time(&(0..64).map(|w| chains.trace(w, 0)).collect::<Vec<_>>());
    let stride = tau.ceil() as usize;
    let draws: Vec<f64> = (0..64).flat_map(|w| chains.trace(w, 0).into_iter().step_by(stride)).collect();
    assert!(draws.len() >= 10_000, "{} effective draws, tau {tau}", draws.len());
    let (_, p) = ks_test(&draws, phi);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn stretch_chain_is_affine_invariant() {
    // Power-of-two scalings and a coordinate permutation are exact in
    // floating point, so the mapped chain must agree bit for bit.
    let scale = [4.0, 0.125, 2.0];
    let perm = [2, 0, 1];
    let lp_x = |x: &[f64]| -0.5 * (x[0] * x[0] + (x[1] - 1.0).powi(2) / 4.0 + x[2] * x[2] * 2.0 + 0.3 * x[0] * x[2]);
    let to_y = |x: &[f64]| -> Vec<f64> { perm.iter().map(|&j| x[j] * scale[j]).collect() };
    let to_x = |y: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; 3];
        for (i, &j) in perm.iter().enumerate() {
            x[j] = y[i] / scale[j];
        }
        x
    };
    let lp_y = |y: &[f64]| lp_x(&to_x(y));
    let mut r = rng(5);
    let wx = init(12, 3, &mut r);
    let wy: Vec<Vec<f64>> = wx.iter().map(|w| to_y(w)).collect();
    let cfg = AiesConfig { n_steps: 300, warmup: 0, thin: 1, moves: MoveConfig::stretch_only() };
    let (cx, _) = aies_run(&lp_x, Ensemble::new(wx, &lp_x).unwrap(), &cfg, &mut rng(6)).unwrap();
    let (cy, _) = aies_run(&lp_y, Ensemble::new(wy, &lp_y).unwrap(), &cfg, &mut rng(6)).unwrap();
    for (sx, sy) in cx.samples.iter().zip(&cy.samples) {
        for (a, b) in sx.iter().zip(sy) {
            assert_eq!(&to_y(a), b);
        }
    }
    assert_eq!(cx.acceptance, cy.acceptance);
}

#[test]
fn initialization_resamples_until_finite() {
    let lp = |x: &[f64]| if x[0] > 0.0 { -x[0] } else { f64::NEG_INFINITY };
    let ens = Ensemble::from_sampler(8, &mut |r| normal_vec(1, r), &lp, &mut rng(7)).unwrap();
    assert!(ens.walkers.iter().all(|w| w[0] > 0.0));
    let never = |_: &[f64]| f64::NEG_INFINITY;
    assert!(matches!(Ensemble::from_sampler(8, &mut |r| normal_vec(1, r), &never, &mut rng(7)), Err(McmcError::Init(_))));
    assert_eq!(default_walkers(2), 64);
    assert_eq!(default_walkers(17), 68);
}
