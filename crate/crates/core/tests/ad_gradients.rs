use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simflow_core::ad::{gradient_check, Activation, Graph, InputShape, LayerSpec, Network, NetworkSpec, Tensor};

fn randomized(spec: NetworkSpec, seed: u64) -> Network {
    // Zero-initialized heads and gates would make some checks vacuous.
    let mut net = Network::build(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let flat: Vec<f32> = (0..net.param_count()).map(|_| rng.random_range(-0.6..0.6)).collect();
    net.params_mut().load_flat(&flat).unwrap();
    net
}

fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn times(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn dense(act: Activation) -> NetworkSpec {
    NetworkSpec {
        input: InputShape::Vector(4),
        output_dim: 3,
        time_embedding_dim: 0,
        layers: vec![
            LayerSpec::Dense { out: 6, activation: Some(act), zero_init: false },
            LayerSpec::Dense { out: 3, activation: None, zero_init: false },
        ],
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn dense_layers(seed in any::<u64>(), silu in any::<bool>()) {
        let act = if silu { Activation::Silu } else { Activation::Elu };
        let net = randomized(dense(act), seed);
        let err = gradient_check(&net, &input(3, 4, seed), None, 1e-4).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn residual_blocks(seed in any::<u64>()) {
        let spec = NetworkSpec::residual_mlp(3, &[8, 8], 2, Activation::Elu, 0, false);
        let net = randomized(spec, seed);
        let err = gradient_check(&net, &input(3, 3, seed), None, 1e-4).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn glu_time_conditioning(seed in any::<u64>()) {
        let spec = NetworkSpec::residual_mlp(3, &[6, 6], 2, Activation::Silu, 8, false);
        let net = randomized(spec, seed);
        let err = gradient_check(&net, &input(3, 3, seed), Some(&times(3, seed)), 1e-4).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn conv_blocks_with_group_norm(seed in any::<u64>()) {
        let spec = NetworkSpec::conv_encoder(2, 6, 2, 4, 2, 3);
        let net = randomized(spec, seed);
        let err = gradient_check(&net, &input(2, 72, seed), None, 1e-4).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }
}

#[test]
fn stop_gradient_blocks_finite_difference_sensitivity() {
    // y = A·x + B·stopgrad(C·x): d/dC must vanish in backward, while a finite
    // difference in C still moves y. The blocked path contributes nothing to
    // the recorded gradient, and the open paths match differences exactly.
    let spec = NetworkSpec {
        input: InputShape::Vector(3),
        output_dim: 2,
        time_embedding_dim: 0,
        layers: vec![LayerSpec::Dense { out: 2, activation: Some(Activation::Elu), zero_init: false }],
    };
    let open = randomized(spec.clone(), 1);
    let blocked = randomized(spec, 2);
    let x = input(4, 3, 3);

    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let a = open.forward(&mut g, xi, None, true).unwrap();
    let c = blocked.forward(&mut g, xi, None, true).unwrap();
    let c = g.stop_grad(c);
    let y = g.add(a, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();

    for t in grads.for_store(blocked.params()) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
    let analytic: Vec<f64> = grads.for_store(open.params()).iter().flat_map(|t| t.data().to_vec()).map(f64::from).collect();

    let total = |net_open: &Network, net_blocked: &Network| -> f64 {
        let ya = net_open.predict(&x, None).unwrap();
        let yb = net_blocked.predict(&x, None).unwrap();
        ya.sum() + yb.sum()
    };
    let eps = 1e-2f32;
    let base = open.params().flatten();
    let mut numeric = Vec::new();
    for k in 0..base.len() {
        let mut up = open.clone();
        let mut v = base.clone();
        v[k] += eps;
        up.params_mut().load_flat(&v).unwrap();
        let mut down = open.clone();
        v[k] -= 2.0 * eps;
        down.params_mut().load_flat(&v).unwrap();
        numeric.push((total(&up, &blocked) - total(&down, &blocked)) / (2.0 * eps as f64));
    }
    let err = simflow_core::ad::max_relative_error(&analytic, &numeric);
    assert!(err < 1e-2, "open path err {err}");

    let mut moved = blocked.clone();
    let mut v = moved.params().flatten();
    v[0] += 0.1;
    moved.params_mut().load_flat(&v).unwrap();
    assert_ne!(total(&open, &moved), total(&open, &blocked));
}

#[test]
fn training_is_bit_reproducible() {
    use simflow_core::ad::{AdamConfig, AdamState};
    let run = || {
        let spec = NetworkSpec::residual_mlp(3, &[16, 16], 2, Activation::Elu, 0, false);
        let mut net = Network::build(spec, 11).unwrap();
        let mut opt = AdamState::new(net.params(), AdamConfig::new(1e-3, 1e-5));
        for step in 0..20 {
            let x = input(8, 3, step);
            let target = input(8, 2, step + 100);
            let (_, mut g, y) = net.forward_recorded(&x, None).unwrap();
            let l = g.squared_error(y, target, None).unwrap();
            let grads = g.backward(l, Tensor::scalar(1.0)).unwrap().for_store(net.params());
            drop(g);
            opt.step(net.params_mut(), &grads).unwrap();
        }
        net.params().flatten()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
