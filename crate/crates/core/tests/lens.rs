use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simflow_core::control::Simulator;
use simflow_core::flow::normal_vec;
use simflow_core::lens::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scene() -> LensScene {
    LensPrior::default().sample(&mut rng(5))
}

#[test]
fn circular_sie_and_shear_examples() {
    let (ax, ay) = Sie::<f64>::new(1.0, 0.0, 0.0, 0.0, 0.0).deflection(3.0, 4.0);
    assert!((ax - 0.6).abs() < 1e-12 && (ay - 0.8).abs() < 1e-12);
    let (sx, sy) = shear_deflection(0.05, 0.0, 0.0, 0.0, 1.0, 0.0);
    assert!((sx - 0.05).abs() < 1e-15 && sy.abs() < 1e-15);
    let (sx, sy) = shear_deflection(0.0, 0.05, 0.0, 0.0, 1.0, 0.0);
    assert!(sx.abs() < 1e-15 && (sy - 0.05).abs() < 1e-15);
}

#[test]
fn sie_matches_circular_at_the_branch_switch() {
    let q = 1.0 - 1.01e-4;
    let (e1, e2) = ellipticity_from_angle(0.3, q);
    let ell = Sie::<f64>::new(1.3, e1, e2, 0.1, -0.05);
    let circ = Sie::<f64>::new(1.3, 0.0, 0.0, 0.1, -0.05);
    assert!(!ell.is_circular() && circ.is_circular());
    let mut r = rng(1);
    for _ in 0..100 {
        let z = normal_vec(2, &mut r);
        let (a, b) = ell.deflection(0.1 + 2.0 * z[0], -0.05 + 2.0 * z[1]);
        let (c, d) = circ.deflection(0.1 + 2.0 * z[0], -0.05 + 2.0 * z[1]);
        assert!((a - c).hypot(b - d) < 1e-4, "{a} {b} vs {c} {d}");
    }
}

#[test]
fn empty_sky_is_pure_background() {
    let mut s = scene();
    s.source.amplitude = 0.0;
    s.lens_light.amplitude = 0.0;
    let inst = Instrument::default();
    assert!(render_noiseless(&s, &inst).iter().all(|&v| v == 0.0));
    let obs = render(&s, &inst, &normal_vec(inst.pixels(), &mut rng(2)));
    let n = obs.image.len() as f64;
    let mean = obs.image.iter().sum::<f64>() / n;
    let sd = (obs.image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 5.0 * inst.background_rms / n.sqrt());
    assert!((sd / inst.background_rms - 1.0).abs() < 0.05);
}

#[test]
fn vanishing_lens_renders_the_unlensed_scene() {
    let mut s = scene();
    s.mass.theta_e = 1e-9;
    s.shear.gamma1 = 0.0;
    s.shear.gamma2 = 0.0;
    let inst = Instrument::default();
    let src = &s.source;
    let ll = &s.lens_light;
    let a = Sersic::<f64>::new(src.amplitude, src.r_eff, src.n, src.e1, src.e2, src.x, src.y);
    let b = Sersic::<f64>::new(ll.amplitude, ll.r_eff, ll.n, ll.e1, ll.e2, ll.x, ll.y);
    let raw: Vec<f64> = pixel_coords(&inst).iter().map(|&(x, y)| a.brightness(x, y) + b.brightness(x, y)).collect();
    let direct = convolve(&raw, inst.size, &psf_taps(&inst));
    let lensed = render_noiseless(&s, &inst);
    let scale = direct.iter().cloned().fold(0.0, f64::max);
    for (u, v) in lensed.iter().zip(&direct) {
        assert!((u - v).abs() < 1e-6 * scale);
    }
}

#[test]
fn psf_conserves_flux() {
    let inst = Instrument::default();
    let taps = psf_taps(&inst);
    assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let n = inst.size;
    let mut img = vec![0.0; n * n];
    let mut r = rng(3);
    for i in 10..n - 10 {
        for j in 10..n - 10 {
            img[i * n + j] = normal_vec(1, &mut r)[0].abs();
        }
    }
    let out = convolve(&img, n, &taps);
    let (a, b) = (img.iter().sum::<f64>(), out.iter().sum::<f64>());
    assert!((a - b).abs() / a < 1e-4);
}

#[test]
fn chi2_levels() {
    let inst = Instrument::default();
    let s = scene();
    let model = render_noiseless(&s, &inst);
    let clean = LensObservation { size: inst.size, sigma: noise_sigma(&model, &inst), image: model };
    assert_eq!(chi2(&s, &clean, &inst), 0.0);
    let obs = render(&s, &inst, &normal_vec(inst.pixels(), &mut rng(4)));
    assert!((chi2(&s, &obs, &inst) - 1.0).abs() < 0.05);
}

#[test]
fn chi2_gradient_matches_finite_differences() {
    let inst = Instrument::default();
    let s = scene();
    let obs = render(&s, &inst, &normal_vec(inst.pixels(), &mut rng(6)));
    let eval = Chi2Eval::new(&inst);
    let mut p = s.to_array();
    // off the truth so every component is non-trivial
    p[0] *= 1.05;
    p[10] *= 0.95;
    p[7] = 0.03;
    p[8] = -0.02;
    let (v, g) = eval.value_grad(&p, &obs.image, &obs.sigma);
    assert!((v - eval.value(&p, &obs.image, &obs.sigma)).abs() < 1e-12 * v.max(1.0));
    for i in 0..N_PARAMS {
        let h = 1e-5 * p[i].abs().max(0.1);
        let mut a = p;
        let mut b = p;
        a[i] += h;
        b[i] -= h;
        let fd = (eval.value(&a, &obs.image, &obs.sigma) - eval.value(&b, &obs.image, &obs.sigma)) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
        assert!(err < 1e-3, "{}: fd {fd} ad {}", PARAM_NAMES[i], g[i]);
    }
}

#[test]
fn prior_respects_bounds_and_ties() {
    let prior = LensPrior::default();
    let mut r = rng(7);
    for _ in 0..2000 {
        let s = prior.sample(&mut r);
        s.validate().unwrap();
        assert!((0.5..=2.0).contains(&s.mass.theta_e));
        assert!(s.mass.e1.hypot(s.mass.e2) <= 0.6 + 1e-12);
        assert!(s.source.e1.hypot(s.source.e2) <= 0.6 + 1e-12);
        assert!(s.shear.gamma1.hypot(s.shear.gamma2) <= 0.1);
        assert_eq!((s.lens_light.x, s.lens_light.y), (s.mass.x, s.mass.y));
        assert_eq!((s.lens_light.e1, s.lens_light.e2), (s.mass.e1, s.mass.e2));
        assert_eq!((s.shear.ra0, s.shear.dec0), (0.0, 0.0));
        let free = s.free();
        assert_eq!(LensScene::from_free(&free), s);
        assert!(prior.log_prob_free(&free).is_finite());
    }
}

#[test]
fn reduced_prior_integrates_to_one_over_ellipticity() {
    // Monte-Carlo over a box around the (e1, e2) support.
    let prior = LensPrior::default();
    let base = scene().free();
    let mut r = rng(8);
    let n = 200_000;
    // log density of everything except the mass ellipticity
    let rest = {
        let mut t = base;
        t[1] = 0.3;
        t[2] = 0.0;
        let q: f64 = 0.7 / 1.3;
        prior.log_prob_free(&t) + (std::f64::consts::PI * 0.75).ln() + (1.2 / (1.0 + q) / (1.0 + q)).ln()
    };
    let mut acc = 0.0;
    for _ in 0..n {
        let u: f64 = rand::Rng::random_range(&mut r, -0.6..0.6);
        let v: f64 = rand::Rng::random_range(&mut r, -0.6..0.6);
        let mut t = base;
        t[1] = u;
        t[2] = v;
        let lp = prior.log_prob_free(&t) - rest;
        if lp.is_finite() {
            acc += lp.exp();
        }
    }
    let integral = acc / n as f64 * 1.44;
    assert!((integral - 1.0).abs() < 0.03, "{integral}");
}

#[test]
fn rendering_is_pure() {
    let inst = Instrument::default();
    let s = scene();
    let z = normal_vec(inst.pixels(), &mut rng(9));
    assert_eq!(render(&s, &inst, &z), render(&s, &inst, &z));
}

#[test]
fn noise_floor_over_prior_scenes() {
    let inst = Instrument { size: 32, pixel_scale: 0.2, ..Instrument::default() };
    let prior = LensPrior::default();
    let mut r = rng(10);
    let mut total = 0.0;
    for _ in 0..100 {
        let s = prior.sample(&mut r);
        let obs = render(&s, &inst, &normal_vec(inst.pixels(), &mut r));
        total += chi2(&s, &obs, &inst);
    }
    let mean = total / 100.0;
    assert!((0.9..=1.3).contains(&mean), "{mean}");
}

#[test]
fn simulator_flow_coordinates() {
    let sim = LensSimulator::new(Instrument { size: 24, pixel_scale: 0.25, ..Instrument::default() }, LensPrior::default()).unwrap();
    let s = scene();
    let u = sim.coords.to_flow(&s);
    let back = sim.coords.from_flow(&u).to_array();
    for (a, b) in back.iter().zip(s.to_array()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(sim.coords.scale[7], 1.0);
    let z = normal_vec(sim.noise_dim(), &mut rng(11));
    let x = sim.simulate(&u, &z).unwrap();
    assert_eq!(x.len(), sim.dim_x());
    let raw = render(&s, sim.instrument(), &z).image;
    let (c, g) = sim.cost_grad(&u, &raw, &z).unwrap();
    assert!(c.is_finite() && g.len() == N_PARAMS);
    let mut bad = u.clone();
    bad[0] = -1e3;
    assert!(sim.simulate(&bad, &z).is_err());
}
