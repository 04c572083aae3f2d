use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simflow_core::ad::{AdamConfig, Checkpoint, Graph, Tensor};
use simflow_core::control::*;
use simflow_core::flow::*;
use simflow_core::tasks::*;

/// S(θ) = θ, C = ½‖S(θ) − x‖².
struct Identity(usize);

impl Simulator for Identity {
    fn dim_theta(&self) -> usize {
        self.0
    }
    fn dim_x(&self) -> usize {
        self.0
    }
    fn noise_dim(&self) -> usize {
        0
    }
    fn differentiable(&self) -> bool {
        true
    }
    fn simulate(&self, u: &[f64], _z: &[f64]) -> Result<Vec<f64>, TaskError> {
        Ok(u.to_vec())
    }
    fn cost_grad(&self, u: &[f64], x: &[f64], _z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        let r: Vec<f64> = u.iter().zip(x).map(|(a, b)| a - b).collect();
        Ok((0.5 * r.iter().map(|v| v * v).sum::<f64>(), r))
    }
}

fn randomize(net: &mut simflow_core::ad::Network, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.param_count();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
    net.params_mut().load_flat(&v).unwrap();
}

#[test]
fn gradient_control_on_a_quadratic() {
    let s = gradient_control(&Identity(2), &[1.0, 0.0], &[0.0, 0.0], &[]).unwrap();
    assert_eq!(s, ControlSignal::Gradient { cost: 0.5, grad: vec![1.0, 0.0] });
    let s = gradient_control(&Identity(2), &[0.3, -2.0], &[0.3, -2.0], &[]).unwrap();
    assert_eq!(s, ControlSignal::Gradient { cost: 0.0, grad: vec![0.0, 0.0] });
}

fn lv() -> LotkaVolterra {
    LotkaVolterra::new(TaskConstants::default().lotka_volterra).unwrap()
}

#[test]
fn lv_gradient_control_matches_finite_differences() {
    let task = lv();
    let sim = TaskSimulator { task: &task, standardizer: Standardizer::identity(20) };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = task.simulate(&[0.7, 0.06, 1.1, 0.04], &task.sample_noise(&mut rng)).unwrap();
    let u = [0.2, -0.4, 0.1, 0.3];
    let z = task.sample_noise(&mut rng);
    let ControlSignal::Gradient { grad, .. } = gradient_control(&sim, &u, &x, &z).unwrap() else { panic!() };
    for i in 0..4 {
        let h = 1e-5;
        let (mut p, mut m) = (u, u);
        p[i] += h;
        m[i] -= h;
        let fd = (sim.cost_grad(&p, &x, &z).unwrap().0 - sim.cost_grad(&m, &x, &z).unwrap().0) / (2.0 * h);
        assert!((fd - grad[i]).abs() < 1e-3 * fd.abs().max(1e-6), "{i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn averaged_gradient_control_matches_the_gradient_of_the_averaged_cost() {
    // For log-normal noise E_z[C] = C(z = 0) + ½, so the gradient of the
    // z-averaged cost is the noiseless gradient.
    let task = lv();
    let sim = TaskSimulator { task: &task, standardizer: Standardizer::identity(20) };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = task.simulate(&[0.7, 0.06, 1.1, 0.04], &task.sample_noise(&mut rng)).unwrap();
    let u = [0.3, -0.2, 0.1, 0.2];
    let (_, exact) = sim.cost_grad(&u, &x, &[0.0; 20]).unwrap();
    let n = 10_000;
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let ControlSignal::Gradient { grad, .. } = gradient_control(&sim, &u, &x, &sim.sample_noise(&mut rng)).unwrap() else { panic!() };
        for i in 0..4 {
            sum[i] += grad[i];
            sq[i] += grad[i] * grad[i];
        }
    }
    for i in 0..4 {
        let m = sum[i] / n as f64;
        let se = ((sq[i] / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - exact[i]).abs() < 3.0 * se, "{i}: {m} vs {} (se {se})", exact[i]);
    }
}

fn lg_base() -> (LinearGaussian, VelocityModel) {
    let task = LinearGaussian::new(TaskConstants::default().linear_gaussian);
    let mut m = VelocityModel::new(ModelConfig::mlp(&[16, 16]), 2, 2, 3).unwrap();
    randomize(m.networks_mut().0, 4);
    (task, m)
}

fn nonzero_control(variant: ControlVariant) -> ControlNet {
    let mut cfg = ControlNetConfig::new(variant);
    cfg.widths = vec![16, 16];
    if variant == ControlVariant::Learned {
        cfg.feature_dim = 3;
    }
    let mut c = ControlNet::new(cfg, 2, 2, 9).unwrap();
    randomize(c.networks_mut().0, 10);
    c
}

#[test]
fn gate_is_exact_and_the_field_is_deterministic() {
    let (_, base) = lg_base();
    let c = nonzero_control(ControlVariant::Gradient);
    let th = Tensor::matrix(3, 2, vec![0.1, -0.5, 1.0, 2.0, -0.3, 0.0]).unwrap();
    let feats = Tensor::matrix(3, 2, vec![0.4; 6]).unwrap();
    let payload = Tensor::matrix(3, 3, vec![1.0, -2.0, 0.5, 0.1, 0.2, 0.3, 3.0, 0.0, -1.0]).unwrap();
    for k in 0..80 {
        let t = k as f64 / 100.0;
        let v = base.velocity(t, &th, &feats, None).unwrap();
        assert_eq!(controlled_velocity(&v, &payload, t, &c).unwrap(), v);
    }
    let v = base.velocity(0.9, &th, &feats, None).unwrap();
    let a = controlled_velocity(&v, &payload, 0.9, &c).unwrap();
    let b = controlled_velocity(&v, &payload, 0.9, &c).unwrap();
    assert_ne!(a, v);
    assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

fn lg_dataset(task: &LinearGaussian, n: usize) -> ControlDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut th = Vec::new();
    let mut xs = Vec::new();
    for _ in 0..n {
        let t = task.prior().sample(&mut rng);
        let x = task.simulate(&t, &task.sample_noise(&mut rng)).unwrap();
        th.extend(t.iter().map(|&v| v as f32));
        xs.extend(x.iter().map(|&v| v as f32));
    }
    ControlDataset::new(Tensor::matrix(n, 2, th).unwrap(), Tensor::matrix(n, 2, xs).unwrap(), None).unwrap()
}

fn ft_config(steps: usize) -> FinetuneConfig {
    FinetuneConfig { steps, batch_size: 16, adam: AdamConfig::new(1e-3, 0.0), sigma_min: 1e-4, clip_norm: None, seed: 5 }
}

#[test]
fn finetuning_leaves_the_base_untouched() {
    let (task, base) = lg_base();
    let before = base.checksum();
    let sim = Counted::new(TaskSimulator { task: &task, standardizer: Standardizer::identity(2) });
    let data = lg_dataset(&task, 200);
    for variant in [ControlVariant::Gradient, ControlVariant::Learned, ControlVariant::Zero] {
        let mut c = nonzero_control(variant);
        let params_before = c.net().params().checksum();
        sim.reset();
        let r = finetune_with_controls(&base, &mut c, &sim, &data, &ft_config(5)).unwrap();
        assert_eq!(base.checksum(), before);
        assert_ne!(c.net().params().checksum(), params_before);
        let expected_calls = if variant == ControlVariant::Zero { 0 } else { 5 * 16 };
        assert_eq!(r.simulator_calls, expected_calls);
        assert_eq!(sim.calls(), expected_calls);
        assert!(r.losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn simulator_calls_follow_the_gate() {
    let (task, base) = lg_base();
    let sim = Counted::new(TaskSimulator { task: &task, standardizer: Standardizer::identity(2) });
    let c = nonzero_control(ControlVariant::Gradient);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = sample_with_controls(&base, &c, &sim, &[0.5, -0.5], &[0.5, -0.5], 1, 64, &StandardNormal(2), &mut rng).unwrap();
    // Grid points k/64 ≥ 0.8 are k = 52..63.
    assert_eq!(out.simulator_calls, 12);
    assert_eq!(sim.calls(), 12);
    sim.reset();
    let out = sample_with_controls(&base, &c, &sim, &[0.5, -0.5], &[0.5, -0.5], 5, 4, &StandardNormal(2), &mut rng).unwrap();
    assert_eq!((out.simulator_calls, sim.calls()), (0, 0));
}

#[test]
fn zero_headed_control_reproduces_base_samples() {
    let (task, base) = lg_base();
    let sim = TaskSimulator { task: &task, standardizer: Standardizer::identity(2) };
    let c = ControlNet::new(ControlNetConfig::new(ControlVariant::Gradient), 2, 2, 1).unwrap();
    let x = [0.3f32, 1.2];
    let a = sample_posterior(&base, &x, 50, 32, &StandardNormal(2), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = sample_with_controls(&base, &c, &sim, &x, &[0.3, 1.2], 50, 32, &StandardNormal(2), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b.samples);
    assert!(b.failed.is_empty());
}

/// Fails whenever the first coordinate is positive.
struct FailsRight;

impl Simulator for FailsRight {
    fn dim_theta(&self) -> usize {
        2
    }
    fn dim_x(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        0
    }
    fn differentiable(&self) -> bool {
        true
    }
    fn simulate(&self, u: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        if u[0] > 0.0 {
            return Err(TaskError::Simulation("blow-up".into()));
        }
        Identity(2).simulate(u, z)
    }
    fn cost_grad(&self, u: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        self.simulate(u, z)?;
        Identity(2).cost_grad(u, x, z)
    }
}

#[test]
fn failed_trajectories_are_dropped() {
    let (_, base) = lg_base();
    let c = nonzero_control(ControlVariant::Gradient);
    let n = 40;
    let out = sample_with_controls(&base, &c, &FailsRight, &[0.0; 2], &[0.0; 2], n, 16, &StandardNormal(2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(!out.failed.is_empty() && out.failed.len() < n);
    assert_eq!(out.samples.rows() + out.failed.len(), n);

    let (task, _) = lg_base();
    let data = lg_dataset(&task, 100);
    let mut c = nonzero_control(ControlVariant::Gradient);
    let r = finetune_with_controls(&base, &mut c, &FailsRight, &data, &ft_config(4)).unwrap();
    assert!(r.failures > 0 && r.failures < 64);
}

#[test]
fn learned_controls_have_configured_width_and_stop_gradients() {
    let (task, _) = lg_base();
    let sim = TaskSimulator { task: &task, standardizer: Standardizer::identity(2) };
    let mut c = nonzero_control(ControlVariant::Learned);
    let enc = c.networks_mut().1.unwrap();
    let s = learned_control(enc, &sim, &[0.1, 0.2], &[1.0, -1.0], &[0.0, 0.5]).unwrap();
    assert_eq!(s.len(), 3);
    // Zero the encoder head: features vanish.
    let store = enc.params_mut();
    let (w, b) = (store.len() - 2, store.len() - 1);
    store.get_mut(w).data_mut().fill(0.0);
    store.get_mut(b).data_mut().fill(0.0);
    let s = learned_control(enc, &sim, &[0.1, 0.2], &[1.0, -1.0], &[0.0, 0.5]).unwrap();
    assert_eq!(s, ControlSignal::Learned { features: vec![0.0; 3] });

    // A simulator recorded in the graph behind a stop-gradient passes no
    // gradient back to θ̂1.
    let enc = nonzero_control(ControlVariant::Learned);
    let enc = enc.encoder().unwrap();
    let mut g = Graph::new();
    let th = g.input(Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap());
    let simulated = g.scale(th, 2.0);
    let stopped = g.stop_grad(simulated);
    let xo = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let input = g.concat(&[stopped, xo]).unwrap();
    let f = enc.forward(&mut g, input, None, true).unwrap();
    let l = g.sum(f);
    let grads = g.backward(l, Tensor::scalar(1.0)).unwrap();
    assert!(grads.input(th).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn control_checkpoint_is_tied_to_its_base() {
    let (_, base) = lg_base();
    let c = nonzero_control(ControlVariant::Learned);
    let ck = Checkpoint::from_reader(&c.to_checkpoint(&base).to_bytes()[..]).unwrap();
    let back = ControlNet::from_checkpoint(&ck, &base).unwrap();
    assert_eq!(back.net().params().checksum(), c.net().params().checksum());
    assert_eq!(back.encoder().unwrap().params().checksum(), c.encoder().unwrap().params().checksum());
    let mut other = base.clone();
    randomize(other.networks_mut().0, 99);
    assert!(matches!(ControlNet::from_checkpoint(&ck, &other), Err(ControlError::BaseMismatch { .. })));
}

fn bimodal_2d(n: usize) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = normal_vec(2 * n, &mut rng);
    let th: Vec<f32> = z.iter().enumerate().map(|(i, v)| (v * 0.3 + if i % 4 < 2 { 1.0 } else { -1.0 }) as f32).collect();
    let x: Vec<f32> = th.iter().map(|v| v * 0.5).collect();
    TrainingSet::new(Tensor::matrix(n, 2, th).unwrap(), Tensor::matrix(n, 2, x).unwrap()).unwrap()
}

fn sc_cfg(p: f64) -> TrainConfig {
    TrainConfig {
        steps: 30,
        batch_size: 32,
        adam: AdamConfig::new(1e-3, 0.0),
        path: PathConfig::default(),
        validation_fraction: 0.1,
        eval_every: 10,
        clip_norm: None,
        self_condition_probability: p,
        seed: 8,
    }
}

#[test]
fn empty_slot_reduces_to_plain_flow_matching() {
    let data = bimodal_2d(400);
    let mut plain = VelocityModel::new(ModelConfig::mlp(&[16]), 2, 2, 1).unwrap();
    let mut sc_cfg_m = ModelConfig::mlp(&[16]);
    sc_cfg_m.self_conditioning = true;
    let mut sc = VelocityModel::new(sc_cfg_m, 2, 2, 1).unwrap();
    // Copy the plain weights; the extra slot rows of the input projection only
    // ever multiply zeros.
    let plain_store = plain.mlp().params().clone();
    {
        let store = sc.networks_mut().0.params_mut();
        for i in 0..store.len() {
            let src = plain_store.get(i);
            let dst = store.get_mut(i);
            if i == 0 {
                let cols = src.shape()[1];
                let n = src.len();
                dst.data_mut()[..n].copy_from_slice(src.data());
                assert_eq!(dst.shape()[1], cols);
            } else {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
    }
    let a = train(&mut plain, &data, &sc_cfg(0.5), &StandardNormal(2)).unwrap();
    let b = train_self_conditioned(&mut sc, &data, &sc_cfg(0.0), &StandardNormal(2)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(train_self_conditioned(&mut plain, &data, &sc_cfg(0.5), &StandardNormal(2)).is_err());

    let c = train_self_conditioned(&mut sc, &data, &sc_cfg(0.5), &StandardNormal(2)).unwrap();
    assert!(c.losses.iter().all(|l| l.is_finite()));
    let s = sample_posterior(&sc, &[0.5, 0.5], 16, 8, &StandardNormal(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(s.is_finite());
}
