use std::path::Path;

use simflow_core::ad::AdamConfig;
use simflow_core::control::{ControlNetConfig, ControlVariant, FinetuneConfig};
use simflow_core::harness::*;
use simflow_core::lens::Instrument;

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::profile("toy").unwrap();
    cfg.out_dir = Some(dir.to_path_buf());
    cfg.data.n_train = 3000;
    cfg.train.steps = 1500;
    cfg.train.eval_every = 250;
    cfg.sampling.n_samples = 400;
    cfg.sampling.euler_steps = 32;
    cfg.eval.n_observations = 2;
    cfg.eval.c2st.seeds = 1;
    cfg.eval.c2st.epochs = 40;
    cfg.sbc.n_problems = 100;
    cfg.sbc.n_samples = 19;
    cfg.sbc.bins = 10;
    cfg
}

#[test]
fn generation_is_byte_identical_and_counts_rows() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path());
    ca.data.n_train = 500;
    let mut cb = ca.clone();
    cb.out_dir = Some(b.path().to_path_buf());
    let ra = cmd_generate(&ca).unwrap();
    cmd_generate(&cb).unwrap();
    let fa = std::fs::read(a.path().join("dataset.bin")).unwrap();
    assert_eq!(fa, std::fs::read(b.path().join("dataset.bin")).unwrap());
    let file = DatasetFile::load(&a.path().join("dataset.bin")).unwrap();
    assert_eq!(file.rows() + file.header.failures, 500);
    assert_eq!(ra["rows"].as_u64().unwrap() as usize, file.rows());
    assert_eq!(file.header.config_hash, ca.data_hash());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path());
    ca.data.n_train = 1000;
    ca.train.steps = 120;
    ca.train.eval_every = 40;
    let mut cb = ca.clone();
    cb.out_dir = Some(b.path().to_path_buf());
    cmd_generate(&ca).unwrap();
    cmd_generate(&cb).unwrap();
    let full = cmd_train(&ca).unwrap();

    let mut half = cb.clone();
    half.train.steps = 50;
    let first = cmd_train(&half).unwrap();
    assert_eq!(first["to_step"], 50);
    let rest = cmd_train(&cb).unwrap();
    assert_eq!(rest["from_step"], 50);
    assert_eq!(full["checksum"], rest["checksum"]);
    let ck = |d: &Path| std::fs::read(d.join("base.ckpt")).unwrap();
    assert_eq!(ck(a.path()), ck(b.path()));
}

#[test]
fn missing_artifacts_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    for stage in [Stage::Train, Stage::Sample, Stage::Evaluate, Stage::Sbc] {
        let err = stage.run(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{stage:?}: {err}");
    }
    let err = cmd_finetune(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn stale_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data.n_train = 300;
    cmd_generate(&cfg).unwrap();
    cfg.seed += 1;
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 4);
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_generate(&cfg).unwrap();
    let train = cmd_train(&cfg).unwrap();
    assert!(train["final_val_loss"].as_f64().unwrap().is_finite());
    cmd_sample(&cfg).unwrap();
    let first = std::fs::read(dir.path().join("samples/base_1.bin")).unwrap();
    cmd_sample(&cfg).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("samples/base_1.bin")).unwrap());

    let eval = cmd_evaluate(&cfg).unwrap();
    let null = eval["mean"]["c2st/null"].as_f64().unwrap();
    assert!((null - 0.5).abs() < 0.08, "{eval}");
    let base = eval["mean"]["c2st/base"].as_f64().unwrap();
    assert!(base < 0.7, "{eval}");
    let jsonl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert!(jsonl.lines().next().unwrap().contains(&cfg.hash()));
    assert!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap().starts_with('#'));

    let sbc = cmd_sbc(&cfg).unwrap();
    assert_eq!(sbc["skipped"], 0);
    for p in sbc["p_values"].as_array().unwrap() {
        assert!(p.as_f64().unwrap() > 0.01, "{sbc}");
    }
    let ranks = std::fs::read_to_string(dir.path().join("sbc_ranks.csv")).unwrap();
    assert_eq!(ranks.lines().count(), 2 + 100);
}

#[test]
fn gradient_controls_finetune_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data.n_train = 600;
    cfg.train.steps = 100;
    cfg.sampling.n_samples = 50;
    cfg.eval.n_observations = 1;
    cfg.control = Some(ControlSetup {
        net: ControlNetConfig::new(ControlVariant::Gradient),
        finetune: FinetuneConfig { steps: 20, batch_size: 8, adam: AdamConfig::new(1e-3, 0.0), sigma_min: 1e-4, clip_norm: None, seed: 3 },
        n_data: Some(200),
    });
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let ft = cmd_finetune(&cfg).unwrap();
    assert_eq!(ft["steps"], 20);
    assert!(ft["simulator_calls"].as_u64().unwrap() > 0);
    let s = cmd_sample(&cfg).unwrap();
    assert!(s["timing"][0]["control_seconds"].as_f64().is_some());
    assert!(dir.path().join("samples/control_0.bin").exists());

    // Retraining the base invalidates the controls.
    cfg.train.steps = 101;
    cmd_train(&cfg).unwrap();
    assert_eq!(cmd_sample(&cfg).unwrap_err().exit_code(), 4);
}

#[test]
fn lens_problem_generates_and_runs_mcmc() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::profile("lens-64").unwrap();
    cfg.out_dir = Some(dir.path().to_path_buf());
    cfg.lens.instrument = Instrument { size: 16, pixel_scale: 0.4, ..Instrument::default() };
    cfg.data.n_train = 20;
    cfg.eval.n_observations = 1;
    cfg.sampling.n_samples = 50;
    cfg.mcmc.aies.warmup = 20;
    cfg.mcmc.aies.n_steps = 20;
    let g = cmd_generate(&cfg).unwrap();
    assert_eq!(g["rows"], 20);
    let file = DatasetFile::load(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!(file.header.row_width(), 23 + 256);
    let m = cmd_mcmc(&cfg).unwrap();
    assert_eq!(m["runs"][0]["walkers"], 68);
    assert!(dir.path().join("mcmc/chain_0.bin").exists());
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(ExperimentConfig::from_json("{").unwrap_err().exit_code(), 2);
    let mut cfg = ExperimentConfig::profile("toy").unwrap();
    cfg.task = "no-such-task".into();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap_err().exit_code(), 2);
    assert_eq!(ExperimentConfig::profile("nope").unwrap_err().exit_code(), 2);
}
