use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simflow_core::flow::normal_vec;
use simflow_core::lens::{render, Instrument, LensPrior};
use simflow_core::metrics::*;
use simflow_core::tasks::{make_task, LinearGaussian, TaskConstants, TaskError};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(n: usize, d: usize, shift: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(d, r).into_iter().map(|v| v + shift).collect()).collect()
}

#[test]
fn c2st_identical_halves() {
    let mut r = rng(0);
    let all = gauss(4000, 2, 0.0, &mut r);
    let acc = c2st(&all[..2000], &all[2000..], &C2stConfig::default()).unwrap();
    assert!((acc.value - 0.5).abs() < 0.03, "{}", acc.value);
}

#[test]
fn c2st_shifted_gaussians_reach_bayes_accuracy() {
    let mut r = rng(1);
    let p = gauss(10_000, 1, 0.0, &mut r);
    let q = gauss(10_000, 1, 1.0, &mut r);
    let acc = c2st(&p, &q, &C2stConfig::default()).unwrap().value;
    assert!((acc - 0.6915).abs() < 0.02, "{acc}");
}

#[test]
fn c2st_disjoint_and_degenerate() {
    let mut r = rng(2);
    let p: Vec<Vec<f64>> = (0..500).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
    let q: Vec<Vec<f64>> = (0..500).map(|_| vec![r.random::<f64>() + 2.0, r.random::<f64>()]).collect();
    let acc = c2st(&p, &q, &C2stConfig::default()).unwrap();
    assert!(acc.value > 0.99, "{acc:?}");
    let flat = vec![vec![1.0, 2.0]; 300];
    assert!(matches!(c2st(&flat, &flat, &C2stConfig::default()), Err(MetricError::Degenerate(_))));
    assert!(c2st(&p[..100], &q[..100], &C2stConfig::default()).is_err());
}

#[test]
fn mmd_null_is_unbiased() {
    let mut r = rng(3);
    let vals: Vec<f64> = (0..1000)
        .map(|_| mmd2_unbiased(&gauss(20, 2, 0.0, &mut r), &gauss(20, 2, 0.0, &mut r), Some(1.0)).unwrap().value)
        .collect();
    let m = vals.iter().sum::<f64>() / 1000.0;
    let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0 / 1000.0).sqrt();
    assert!(m.abs() < 3.0 * se, "{m} ± {se}");
}

#[test]
fn mmd_matches_population_value() {
    // E k(X, Y) = γ/√(γ²+2) · exp(−Δ²/(2(γ²+2))) for unit-variance 1-d Gaussians.
    let ek = |delta: f64| (1.0 / 3f64.sqrt()) * (-delta * delta / 6.0).exp();
    let truth = 2.0 * (ek(0.0) - ek(2.0));
    let mut r = rng(4);
    let a = gauss(10_000, 1, 0.0, &mut r);
    let b = gauss(10_000, 1, 2.0, &mut r);
    let full = mmd2_unbiased(&a, &b, Some(1.0)).unwrap().value;
    // block estimates at n/10 have ~10× the variance of the full estimate
    let blocks: Vec<f64> = (0..10)
        .map(|i| mmd2_unbiased(&a[i * 1000..(i + 1) * 1000], &b[i * 1000..(i + 1) * 1000], Some(1.0)).unwrap().value)
        .collect();
    let bm = blocks.iter().sum::<f64>() / 10.0;
    let se = (blocks.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / 9.0).sqrt() / 10f64.sqrt();
    assert!((full - truth).abs() < 3.0 * se, "{full} vs {truth} (se {se})");
    let report = mmd2_unbiased(&a[..500], &b[..500], None).unwrap();
    assert!(report.config["bandwidth"].as_f64().unwrap() > 1.0);
}

fn lg_sbc(exact: bool) -> SbcResult {
    let c = TaskConstants::default();
    let task = make_task("linear-gaussian", &c).unwrap();
    let lg = LinearGaussian::new(c.linear_gaussian);
    let mut r = rng(if exact { 5 } else { 6 });
    sbc_ranks::<TaskError>(
        &mut |r| task.sample_prior(1, r).remove(0),
        &mut |t, r| task.simulate(t, &task.sample_noise(r)),
        &mut |x, l, r| {
            let (mean, var) = lg.posterior(x);
            Ok((0..l)
                .map(|_| {
                    let z = normal_vec(mean.len(), r);
                    if exact {
                        mean.iter().zip(z).map(|(m, z)| m + var.sqrt() * z).collect()
                    } else {
                        vec![0.0; mean.len()]
                    }
                })
                .collect())
        },
        500,
        19,
        &mut r,
    )
    .unwrap()
}

#[test]
fn sbc_exact_posterior_is_uniform() {
    let res = lg_sbc(true);
    assert_eq!(res.skipped, 0);
    assert!(res.ranks.iter().all(|r| r.len() == 500 && r.iter().all(|&v| v <= 19)));
    for p in res.p_values(20).unwrap() {
        assert!(p > 0.01, "{p}");
    }
}

#[test]
fn sbc_degenerate_sampler_is_flagged() {
    for p in lg_sbc(false).p_values(20).unwrap() {
        assert!(p < 0.01, "{p}");
    }
}

#[test]
fn sbc_skips_failures_and_checks_sizes() {
    let mut r = rng(7);
    let mut n = 0;
    let res = sbc_ranks::<()>(
        &mut |r| vec![r.random::<f64>()],
        &mut |t, _| {
            n += 1;
            if n % 5 == 0 {
                Err(())
            } else {
                Ok(t.to_vec())
            }
        },
        &mut |_, l, r| Ok((0..l).map(|_| vec![r.random::<f64>()]).collect()),
        100,
        10,
        &mut r,
    )
    .unwrap();
    assert_eq!(res.skipped, 20);
    assert_eq!(res.ranks[0].len(), 80);
    let err = sbc_ranks::<()>(&mut |_| vec![0.0], &mut |t, _| Ok(t.to_vec()), &mut |_, _, _| Ok(vec![]), 10, 10, &mut r);
    assert!(err.is_err());
}

#[test]
fn uniformity_p_values_are_uniform_under_null() {
    let mut r = rng(8);
    let ps: Vec<f64> = (0..100)
        .map(|_| {
            let ranks: Vec<usize> = (0..1000).map(|_| r.random_range(0..20)).collect();
            uniformity_test(&ranks, 19, 20).unwrap()
        })
        .collect();
    let (_, p) = ks_test(&ps, |v| v.clamp(0.0, 1.0));
    assert!(p > 0.01, "{p}");
}

#[test]
fn avg_chi2_truth_and_prior() {
    let inst = Instrument { size: 32, pixel_scale: 0.2, ..Instrument::default() };
    let prior = LensPrior::default();
    let mut r = rng(9);
    let scenes: Vec<_> = (0..20).map(|_| prior.sample(&mut r)).collect();
    let obs: Vec<_> = scenes.iter().map(|s| render(s, &inst, &normal_vec(inst.pixels(), &mut r))).collect();
    let truth = avg_chi2::<()>(&obs, &inst, &mut |i, _| Ok(vec![scenes[i]; 4]));
    assert!((0.95..=1.3).contains(&truth.mean), "{}", truth.mean);
    assert_eq!(truth.per_system.len(), 20);
    let mut r2 = rng(10);
    let from_prior = avg_chi2::<()>(&obs, &inst, &mut |i, _| {
        if i == 0 {
            Err(())
        } else {
            Ok((0..4).map(|_| prior.sample(&mut r2)).collect())
        }
    });
    assert_eq!(from_prior.failures, 1);
    assert!(from_prior.mean > 10.0, "{}", from_prior.mean);
}
