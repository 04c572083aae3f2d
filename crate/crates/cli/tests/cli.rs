use std::path::Path;
use std::process::{Command, Output};

fn simflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simflow")).args(args).output().unwrap()
}

fn toy_config(dir: &Path) -> std::path::PathBuf {
    let out = simflow(&["config", "--profile", "toy"]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["data"]["n_train"] = 400.into();
    cfg["sampling"]["n_samples"] = 250.into();
    cfg["eval"]["n_observations"] = 1.into();
    let path = dir.join("toy.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        simflow(&args)
    };
    let g = run("generate", &[]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&g.stdout).unwrap();
    assert_eq!(summary["rows"], 400);

    let t = run("train", &["--steps", "30"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let train: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    assert_eq!(train["to_step"], 30);
    let s = run("sample", &["--steps", "8"]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert!(out.join("samples/base_0.bin").exists());
    let text = std::fs::read_to_string(out.join("train.json")).unwrap();
    assert!(text.contains("\"git_describe\""));

    // No control section in the toy config.
    assert_eq!(run("finetune", &[]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(simflow(&["train", "--profile", "toy", "--out", out]).status.code(), Some(4));
    assert_eq!(simflow(&["train", "--profile", "no-such"]).status.code(), Some(2));
    assert_eq!(simflow(&["train"]).status.code(), Some(2));
    assert_eq!(simflow(&["train", "--config", "/nonexistent.json"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"name\": 3}").unwrap();
    assert_eq!(simflow(&["generate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(simflow(&["bogus"]).status.code(), Some(2));
}
