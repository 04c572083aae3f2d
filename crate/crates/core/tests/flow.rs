use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simflow_core::ad::{AdamConfig, Graph, Tensor};
use simflow_core::flow::*;

/// Marginal OT velocity towards N(μ, s²) from N(0, 1); the trajectory from
/// θ0 is tμ + σ_t·θ0 with σ_t² = t²s² + (1 − kt)².
fn gaussian_target_field(mu: f64, s: f64, sigma_min: f64) -> impl Fn(f64, f64) -> f64 {
    let k = 1.0 - sigma_min;
    move |t, th| {
        let var = t * t * s * s + (1.0 - k * t).powi(2);
        let dvar = 2.0 * t * s * s - 2.0 * k * (1.0 - k * t);
        mu + 0.5 * dvar / var * (th - t * mu)
    }
}

fn euler_endpoint_error(n: usize) -> f64 {
    let (mu, s, sm) = (1.5, 0.3, 1e-4);
    let v = gaussian_target_field(mu, s, sm);
    let theta0 = 0.8f64;
    let mut th = theta0;
    for k in 0..n {
        th += v(k as f64 / n as f64, th) / n as f64;
    }
    let sigma1 = (s * s + sm * sm).sqrt();
    (th - (mu + sigma1 * theta0)).abs()
}

#[test]
fn euler_is_first_order_on_the_analytic_ot_field() {
    let ns = [16usize, 32, 64, 128, 256, 512];
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = ns.iter().map(|&n| euler_endpoint_error(n).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((-1.2..=-0.8).contains(&slope), "slope {slope}");
    for w in ns.windows(2) {
        assert!(euler_endpoint_error(w[1]) < euler_endpoint_error(w[0]));
    }
}

#[test]
fn euler_is_exact_for_a_point_mass_target() {
    // Straight conditional paths: the velocity is constant along each trajectory.
    let (mu, sm) = (2.0f64, 1e-4);
    let k = 1.0 - sm;
    let x0 = Tensor::matrix(3, 1, vec![-1.0, 0.0, 0.7]).unwrap();
    for n in [4usize, 64] {
        let out = integrate(
            |_, t, th| {
                let d = th.data().iter().map(|&x| ((mu - k * x as f64) / (1.0 - k * t)) as f32).collect();
                Ok(Tensor::matrix(th.rows(), 1, d).unwrap())
            },
            x0.clone(),
            n,
        )
        .unwrap();
        for (o, z) in out.data().iter().zip(x0.data()) {
            assert!((*o as f64 - (mu + sm * *z as f64)).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn ot_target_is_the_path_derivative(
        th1 in -5.0f64..5.0, z in -4.0f64..4.0, t in 0.0f64..0.999, sm in 1e-5f64..0.5
    ) {
        let s = sample_ot_path(&[th1], &[], t, &[z], sm).unwrap();
        let deriv = th1 - (1.0 - sm) * z;
        let rel = (s.u_target[0] - deriv).abs() / deriv.abs().max(1e-12);
        prop_assert!(rel < 1e-6 || (s.u_target[0] - deriv).abs() < 1e-12, "rel {}", rel);
    }

    #[test]
    fn x_prediction_round_trip(x1 in -10.0f64..10.0, th in -10.0f64..10.0, t in 0.0f64..=0.99) {
        let v = velocity_from_x_prediction(&[x1], &[th], t).unwrap();
        let back = one_step_estimate(&[th], t, &v)[0];
        prop_assert!((back - x1).abs() <= 1e-6 * x1.abs().max(1.0));
    }
}

fn zero_model(dim_obs: usize) -> VelocityModel {
    let mut m = VelocityModel::new(ModelConfig::mlp(&[4]), 2, dim_obs, 0).unwrap();
    let (mlp, _) = m.networks_mut();
    let n = mlp.param_count();
    mlp.params_mut().load_flat(&vec![0.0; n]).unwrap();
    m
}

fn batch(u: Vec<f32>, rows: usize) -> PathBatch {
    PathBatch {
        t: vec![0.3; rows],
        theta_t: Tensor::zeros(&[rows, 2]),
        u_target: Tensor::matrix(rows, 2, u).unwrap(),
        x: Tensor::zeros(&[rows, 1]),
        weights: None,
    }
}

#[test]
fn cfm_loss_conventions() {
    let m = zero_model(1);
    let mut g = Graph::new();
    let l = record_loss(&m, &mut g, &batch(vec![3.0, 4.0], 1), None, false).unwrap();
    assert_eq!(g.value(l).data()[0], 25.0);

    let single = batch(vec![3.0, 4.0, -1.0, 0.5], 2);
    let doubled = batch(vec![3.0, 4.0, -1.0, 0.5, 3.0, 4.0, -1.0, 0.5], 4);
    assert_eq!(evaluate_loss(&m, &[single]).unwrap(), evaluate_loss(&m, &[doubled]).unwrap());
}

#[test]
fn perfect_regressor_has_zero_loss() {
    // Zero model against zero targets.
    let m = zero_model(1);
    assert_eq!(evaluate_loss(&m, &[batch(vec![0.0; 6], 3)]).unwrap(), 0.0);
}

fn bimodal(n: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let th: Vec<f32> = (0..n)
        .map(|_| {
            let c = if rng.random::<bool>() { 1.0 } else { -1.0 };
            c + 0.35 * normal_vec(1, &mut rng)[0] as f32
        })
        .collect();
    TrainingSet::new(Tensor::matrix(n, 1, th).unwrap(), Tensor::matrix(n, 0, vec![]).unwrap()).unwrap()
}

fn toy_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 128,
        adam: AdamConfig::new(2e-3, 0.0),
        path: PathConfig::default(),
        validation_fraction: 0.1,
        eval_every: 100,
        clip_norm: None,
        self_condition_probability: 0.5,
        seed: 4,
    }
}

#[test]
fn trained_density_integrates_to_one() {
    let data = bimodal(4000, 1);
    let mut model = VelocityModel::new(ModelConfig::mlp(&[32, 32]), 1, 0, 2).unwrap();
    let cfg = toy_config(1500);
    let report = train(&mut model, &data, &cfg, &StandardNormal(1)).unwrap();
    let first = report.curve.first().unwrap().val_loss.unwrap();
    let last = report.curve.last().unwrap().val_loss.unwrap();
    assert!(last < first, "validation loss {first} -> {last}");

    let (lo, hi, n) = (-6.0f64, 6.0f64, 600usize);
    let h = (hi - lo) / n as f64;
    let grid: Vec<f32> = (0..n).map(|i| (lo + (i as f64 + 0.5) * h) as f32).collect();
    let field = Conditioned::new(&model, &[]).unwrap();
    let lp = log_density(&field, &StandardNormal(1), &Tensor::matrix(n, 1, grid).unwrap(), 100).unwrap();
    let mass: f64 = lp.iter().map(|l| l.exp() * h).sum();
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = bimodal(600, 3);
    let cfg = toy_config(40);
    let src = StandardNormal(1);

    let mut a = VelocityModel::new(ModelConfig::mlp(&[16]), 1, 0, 5).unwrap();
    train(&mut a, &data, &cfg, &src).unwrap();

    let mut b = VelocityModel::new(ModelConfig::mlp(&[16]), 1, 0, 5).unwrap();
    let mut st = TrainState::new(&b, &cfg);
    train_flow(&mut b, &data, &cfg, &src, &mut st, 17).unwrap();
    let mut ck = b.to_checkpoint();
    st.optimizer.save_into(&mut ck);
    let ck = simflow_core::ad::Checkpoint::from_reader(&ck.to_bytes()[..]).unwrap();
    let mut c = VelocityModel::from_checkpoint(&ck).unwrap();
    let mut st = TrainState::resume(ModelOptimizer::load_from(&ck, &c, cfg.adam).unwrap());
    assert_eq!(st.step, 17);
    train_flow(&mut c, &data, &cfg, &src, &mut st, cfg.steps).unwrap();
    assert_eq!(c.checksum(), a.checksum());
}

#[test]
fn independent_coupling_and_x_prediction_train() {
    let data = bimodal(1000, 7);
    let mut cfg = toy_config(200);
    cfg.path.kind = PathKind::IndependentCoupling;
    let mut m = VelocityModel::new(ModelConfig::mlp(&[16]), 1, 0, 1).unwrap();
    let r = train(&mut m, &data, &cfg, &StandardNormal(1)).unwrap();
    assert!(r.losses.iter().all(|l| l.is_finite()));

    let mut mc = ModelConfig::mlp(&[16]);
    mc.parameterization = Parameterization::XPrediction;
    let mut m = VelocityModel::new(mc, 1, 0, 1).unwrap();
    let cfg = toy_config(200);
    let r = train(&mut m, &data, &cfg, &StandardNormal(1)).unwrap();
    assert!(r.losses.iter().all(|l| l.is_finite()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sample_posterior(&m, &[], 64, 32, &StandardNormal(1), &mut rng).unwrap();
    assert!(s.is_finite());
}
