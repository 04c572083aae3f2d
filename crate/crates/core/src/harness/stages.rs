//! File-backed pipeline stages, one per CLI subcommand. Each writes into
//! the configured output directory and returns a JSON summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use super::pipeline::*;
use super::{DatasetFile, DatasetHeader, ExperimentConfig, HarnessError, Problem, ResultMeta, DATASET_VERSION, GIT_DESCRIBE};
use crate::ad::Checkpoint;
use crate::control::ControlNet;
use crate::flow::{train_flow, ModelOptimizer, StandardNormal, TrainState, VelocityModel};
use crate::lens::LensObservation;
use crate::metrics::{avg_chi2, c2st, mmd2_unbiased, reports_csv, sbc_ranks, MetricReport};
use crate::rng::stream;
use crate::tasks::Standardizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Finetune,
    Sample,
    Evaluate,
    Sbc,
    Mcmc,
}

impl Stage {
    pub fn run(self, cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
        match self {
            Stage::Generate => cmd_generate(cfg),
            Stage::Train => cmd_train(cfg),
            Stage::Finetune => cmd_finetune(cfg),
            Stage::Sample => cmd_sample(cfg),
            Stage::Evaluate => cmd_evaluate(cfg),
            Stage::Sbc => cmd_sbc(cfg),
            Stage::Mcmc => cmd_mcmc(cfg),
        }
    }
}

const DATASET: &str = "dataset.bin";
const BASE: &str = "base.ckpt";
const CONTROL: &str = "control.ckpt";

fn out(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require(path: &Path, hint: &str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Missing(format!("{} (run `{hint}` first)", path.display())))
    }
}

fn write_json(path: &Path, meta: &ResultMeta, body: Value) -> Result<Value, HarnessError> {
    let mut v = json!({ "meta": meta });
    if let (Some(o), Value::Object(b)) = (v.as_object_mut(), body) {
        o.extend(b);
    }
    std::fs::write(path, serde_json::to_string_pretty(&v).expect("serializable"))?;
    Ok(v)
}

fn header(cfg: &ExperimentConfig, hash: String, meta: Value) -> DatasetHeader {
    DatasetHeader {
        format_version: DATASET_VERSION,
        task: cfg.task.clone(),
        rows: 0,
        columns: Vec::new(),
        seed: cfg.seed,
        config_hash: hash,
        git_describe: GIT_DESCRIBE.into(),
        failures: 0,
        meta,
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let path = cfg.out_dir().join(DATASET);
    require(&path, "simflow generate")?;
    let file = DatasetFile::load(&path)?;
    if file.header.config_hash != cfg.data_hash() {
        return Err(HarnessError::Missing(format!(
            "{} was generated for data hash {}, config has {}",
            path.display(),
            file.header.config_hash,
            cfg.data_hash()
        )));
    }
    Ok(Dataset { theta: file.group("theta")?, x: file.group("x")?, failures: file.header.failures })
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let problem = Problem::new(cfg)?;
    let t0 = Instant::now();
    let data = generate(&problem, cfg.data.n_train, cfg.seed, cfg.data.max_failure_rate)?;
    let mut h = header(cfg, cfg.data_hash(), json!({ "requested": cfg.data.n_train }));
    h.failures = data.failures;
    let file = DatasetFile::from_groups(h, &[("theta", &data.theta), ("x", &data.x)])?;
    file.save(&dir.join(DATASET))?;
    Ok(json!({ "rows": file.rows(), "failures": data.failures, "seconds": t0.elapsed().as_secs_f64() }))
}

fn train_key(cfg: &ExperimentConfig) -> String {
    let mut t = cfg.train.clone();
    t.steps = 0;
    serde_json::to_string(&(&cfg.model, t, cfg.data_hash())).expect("serializable")
}

fn load_base(cfg: &ExperimentConfig) -> Result<(VelocityModel, Standardizer, Checkpoint), HarnessError> {
    let path = cfg.out_dir().join(BASE);
    require(&path, "simflow train")?;
    let ck = Checkpoint::load(&path)?;
    let model = VelocityModel::from_checkpoint(&ck)?;
    let std: Standardizer = ck
        .meta
        .get("standardizer")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| HarnessError::Format("base checkpoint lacks its standardizer".into()))?;
    Ok((model, std, ck))
}

/// Trains up to `cfg.train.steps`, resuming from an existing checkpoint
/// made with the same model, optimizer and data settings.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let meta = ResultMeta::new("train", cfg);
    let problem = Problem::new(cfg)?;
    let data = load_dataset(cfg)?;
    let key = train_key(cfg);
    let resume = match load_base(cfg) {
        Ok((m, s, ck)) if ck.meta.get("train_key") == Some(&key) => {
            let opt = ModelOptimizer::load_from(&ck, &m, cfg.train.adam)?;
            Some((m, s, opt))
        }
        _ => None,
    };
    let resumed = resume.is_some();
    let (mut model, standardizer, mut state) = match resume {
        Some((m, s, opt)) => (m, s, TrainState::resume(opt)),
        None => {
            let s = problem.fit_standardizer(&data.x)?;
            let m = VelocityModel::new(cfg.model.clone(), problem.dim_theta(), problem.dim_x(), crate::rng::derive_seed(cfg.seed, "init", 0))?;
            let st = TrainState::new(&m, &cfg.train);
            (m, s, st)
        }
    };
    let start = state.step;
    let set = training_set(&problem, &standardizer, &data)?;
    let t0 = Instant::now();
    let report = train_flow(&mut model, &set, &cfg.train, &StandardNormal(problem.dim_theta()), &mut state, cfg.train.steps)?;
    let seconds = t0.elapsed().as_secs_f64();

    let mut ck = model.to_checkpoint();
    state.optimizer.save_into(&mut ck);
    ck.meta.insert("standardizer".into(), serde_json::to_string(&standardizer).expect("serializable"));
    ck.meta.insert("train_key".into(), key);
    ck.meta.insert("config_hash".into(), cfg.hash());
    ck.meta.insert("git_describe".into(), GIT_DESCRIBE.into());
    ck.save(dir.join(BASE))?;

    let csv_path = dir.join("train_curve.csv");
    let body = report.to_csv();
    if resumed && csv_path.exists() {
        let mut old = std::fs::read_to_string(&csv_path)?;
        old.push_str(body.split_once('\n').map_or("", |(_, rows)| rows));
        std::fs::write(&csv_path, old)?;
    } else {
        std::fs::write(&csv_path, meta.csv_comment() + &body)?;
    }
    let last = report.curve.last().copied();
    write_json(
        &dir.join("train.json"),
        &meta,
        json!({
            "from_step": start,
            "to_step": state.step,
            "seconds": seconds,
            "seconds_per_step": seconds / (state.step - start).max(1) as f64,
            "final_train_loss": last.map(|p| p.train_loss),
            "final_val_loss": last.and_then(|p| p.val_loss),
            "param_count": model.param_count(),
            "checksum": model.checksum(),
        }),
    )
}

fn load_control(cfg: &ExperimentConfig, base: &VelocityModel) -> Result<ControlNet, HarnessError> {
    let path = cfg.out_dir().join(CONTROL);
    require(&path, "simflow finetune")?;
    Ok(ControlNet::from_checkpoint(&Checkpoint::load(&path)?, base)?)
}

pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let setup = cfg.control.as_ref().ok_or_else(|| HarnessError::Config("config has no `control` section".into()))?;
    let problem = Problem::new(cfg)?;
    let (model, standardizer, _) = load_base(cfg)?;
    if model.dim_theta() != problem.dim_theta() || model.dim_obs() != problem.dim_x() {
        return Err(HarnessError::Config("base checkpoint dimensions do not match the task".into()));
    }
    let before = model.checksum();
    let data = load_dataset(cfg)?;
    let base = Trained { model, standardizer, report: Default::default() };
    let t0 = Instant::now();
    let (control, report) = finetune(&problem, &base, &data, setup, cfg.seed)?;
    let seconds = t0.elapsed().as_secs_f64();
    if base.model.checksum() != before {
        return Err(HarnessError::Numerical("base flow changed during finetuning".into()));
    }
    control.to_checkpoint(&base.model).save(dir.join(CONTROL))?;
    let n = report.losses.len().max(1);
    let tail = &report.losses[n.saturating_sub(n / 10 + 1)..];
    write_json(
        &dir.join("finetune.json"),
        &ResultMeta::new("finetune", cfg),
        json!({
            "variant": setup.net.variant,
            "steps": report.losses.len(),
            "simulator_calls": report.simulator_calls,
            "failures": report.failures,
            "final_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            "seconds": seconds,
            "control_params": control.param_count(),
            "base_params": base.model.param_count(),
            "param_ratio": control.param_count() as f64 / base.model.param_count() as f64,
            "base_checksum": before,
        }),
    )
}

fn samples_file(cfg: &ExperimentConfig, rows: &[Vec<f64>], obs: usize, sampler: &str) -> Result<DatasetFile, HarnessError> {
    DatasetFile::from_groups(header(cfg, cfg.hash(), json!({ "observation": obs, "sampler": sampler })), &[("sample", rows)])
}

fn load_samples(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    require(path, "simflow sample")?;
    DatasetFile::load(path)?.group("sample")
}

pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let sdir = dir.join("samples");
    std::fs::create_dir_all(&sdir)?;
    let problem = Problem::new(cfg)?;
    let (model, standardizer, _) = load_base(cfg)?;
    let control = match cfg.control {
        Some(_) => Some(load_control(cfg, &model)?),
        None => None,
    };
    let obs = observations(&problem, cfg.seed, cfg.eval.n_observations)?;
    std::fs::write(dir.join("observations.json"), serde_json::to_string(&obs).expect("serializable"))?;
    let (n, steps) = (cfg.sampling.n_samples, cfg.sampling.euler_steps);
    let mut timing = Vec::new();
    for (i, o) in obs.iter().enumerate() {
        let t0 = Instant::now();
        let s = sample_base(&problem, &model, &standardizer, &o.x, n, steps, &mut stream(cfg.seed, "sample-base", i as u64))?;
        let base_secs = t0.elapsed().as_secs_f64();
        samples_file(cfg, &s, i, "base")?.save(&sdir.join(format!("base_{i}.bin")))?;
        let mut row = json!({ "observation": i, "base_seconds": base_secs, "base_seconds_per_step": base_secs / steps as f64,
                               "base_seconds_per_1000": base_secs * 1000.0 / n as f64 });
        if let Some(c) = &control {
            let t1 = Instant::now();
            let d = sample_controlled(&problem, &model, &standardizer, c, &o.x, n, steps, &mut stream(cfg.seed, "sample-control", i as u64))?;
            let secs = t1.elapsed().as_secs_f64();
            samples_file(cfg, &d.samples, i, "control")?.save(&sdir.join(format!("control_{i}.bin")))?;
            row["control_seconds"] = json!(secs);
            row["control_seconds_per_1000"] = json!(secs * 1000.0 / n as f64);
            row["control_failed"] = json!(d.failed);
            row["simulator_calls"] = json!(d.simulator_calls);
        }
        timing.push(row);
    }
    write_json(&dir.join("sampling.json"), &ResultMeta::new("sample", cfg), json!({ "euler_steps": steps, "n_samples": n, "timing": timing }))
}

fn load_observations(cfg: &ExperimentConfig) -> Result<Vec<Observation>, HarnessError> {
    let path = cfg.out_dir().join("observations.json");
    require(&path, "simflow sample")?;
    serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| HarnessError::Format(e.to_string()))
}

fn reference_for(cfg: &ExperimentConfig, problem: &Problem, o: &Observation, i: usize, n: usize) -> Result<Vec<Vec<f64>>, HarnessError> {
    let rdir = cfg.out_dir().join("reference");
    std::fs::create_dir_all(&rdir)?;
    let path = rdir.join(format!("ref_{i}.bin"));
    if let Ok(f) = DatasetFile::load(&path) {
        if f.header.config_hash == cfg.hash() && f.rows() == n {
            return f.group("sample");
        }
    }
    let r = reference_posterior(problem, &o.x, n, cfg.eval.reference, &cfg.mcmc, &mut stream(cfg.seed, "reference", i as u64))?;
    let f = DatasetFile::from_groups(
        header(cfg, cfg.hash(), json!({ "observation": i, "method": r.method, "seconds": r.seconds })),
        &[("sample", &r.samples)],
    )?;
    f.save(&path)?;
    Ok(r.samples)
}

fn tagged(r: MetricReport, name: &str, obs: Option<usize>) -> MetricReport {
    MetricReport { metric: name.into(), config: json!({ "observation": obs, "details": r.config }), ..r }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let meta = ResultMeta::new("evaluate", cfg);
    let problem = Problem::new(cfg)?;
    let obs = load_observations(cfg)?;
    let sdir = dir.join("samples");
    let has_control = cfg.control.is_some();
    let mut reports = Vec::new();
    if let Problem::Lens(l) = &problem {
        let inst = l.instrument();
        let lens_obs: Vec<LensObservation> = obs.iter().map(|o| LensObservation::from_image(o.x.clone(), inst)).collect();
        let scenes = |s: Vec<Vec<f64>>| -> Vec<crate::lens::LensScene> {
            s.into_iter()
                .take(cfg.eval.chi2_samples)
                .map(|r| crate::lens::LensScene::from_array(&r.try_into().expect("23 parameters")))
                .collect()
        };
        let truth = avg_chi2::<HarnessError>(&lens_obs, inst, &mut |i, _| {
            Ok(vec![crate::lens::LensScene::from_array(&obs[i].theta.clone().try_into().expect("23 parameters"))])
        });
        reports.push(tagged(MetricReport::new("chi2", truth.mean), "chi2/truth", None));
        let mut samplers = vec!["base"];
        if has_control {
            samplers.push("control");
        }
        for s in samplers {
            let sum = avg_chi2::<HarnessError>(&lens_obs, inst, &mut |i, _| {
                Ok(scenes(load_samples(&sdir.join(format!("{s}_{i}.bin")))?))
            });
            reports.push(
                tagged(MetricReport::new("chi2", sum.mean), &format!("chi2/{s}"), None)
                    .with_config(json!({ "failures": sum.failures, "per_system": sum.per_system })),
            );
        }
    } else {
        for (i, o) in obs.iter().enumerate() {
            let base = load_samples(&sdir.join(format!("base_{i}.bin")))?;
            let reference = reference_for(cfg, &problem, o, i, base.len())?;
            if i == 0 {
                let h = reference.len() / 2;
                reports.push(tagged(c2st(&reference[..h], &reference[h..], &cfg.eval.c2st)?, "c2st/null", Some(i)));
            }
            let mut sets = vec![("base", base)];
            if has_control {
                sets.push(("control", load_samples(&sdir.join(format!("control_{i}.bin")))?));
            }
            for (name, s) in sets {
                reports.push(tagged(c2st(&s, &reference, &cfg.eval.c2st)?, &format!("c2st/{name}"), Some(i)));
                reports.push(tagged(mmd2_unbiased(&s, &reference, cfg.eval.mmd_bandwidth)?, &format!("mmd2/{name}"), Some(i)));
            }
        }
    }
    let lines: String = reports.iter().map(|r| format!("{}\n", r.json_line())).collect();
    std::fs::write(dir.join("metrics.jsonl"), format!("{}\n", serde_json::to_string(&meta).expect("serializable")) + &lines)?;
    std::fs::write(dir.join("metrics.csv"), meta.csv_comment() + &reports_csv(&reports))?;
    let mut summary = serde_json::Map::new();
    for name in ["c2st/null", "c2st/base", "c2st/control", "mmd2/base", "mmd2/control", "chi2/truth", "chi2/base", "chi2/control"] {
        let v: Vec<f64> = reports.iter().filter(|r| r.metric == name).map(|r| r.value).collect();
        if !v.is_empty() {
            summary.insert(name.into(), json!(v.iter().sum::<f64>() / v.len() as f64));
        }
    }
    Ok(json!({ "meta": meta, "mean": summary, "rows": reports.len() }))
}

pub fn cmd_sbc(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let meta = ResultMeta::new("sbc", cfg);
    let problem = Problem::new(cfg)?;
    let (model, standardizer, _) = load_base(cfg)?;
    let mut rng = stream(cfg.seed, "sbc", 0);
    let t0 = Instant::now();
    let res = sbc_ranks::<HarnessError>(
        &mut |r| problem.sample_prior(r),
        &mut |t, r| problem.simulate(t, r).map_err(Into::into),
        &mut |x, l, r| sample_base(&problem, &model, &standardizer, x, l, cfg.sampling.euler_steps, r),
        cfg.sbc.n_problems,
        cfg.sbc.n_samples,
        &mut rng,
    )?;
    let coords = problem.informative_coords();
    let all_p = res.p_values(cfg.sbc.bins)?;
    let p: Vec<f64> = coords.iter().map(|&k| all_p[k]).collect();

    let mut csv = meta.csv_comment();
    csv.push_str(&coords.iter().map(|k| format!("theta_{k}")).collect::<Vec<_>>().join(","));
    csv.push('\n');
    for row in 0..res.ranks.first().map_or(0, |r| r.len()) {
        csv.push_str(&coords.iter().map(|&k| res.ranks[k][row].to_string()).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    std::fs::write(dir.join("sbc_ranks.csv"), csv)?;
    write_json(
        &dir.join("sbc.json"),
        &meta,
        json!({
            "coords": coords,
            "p_values": p,
            "min_p": p.iter().cloned().fold(f64::INFINITY, f64::min),
            "n_samples": res.n_samples,
            "problems": cfg.sbc.n_problems,
            "skipped": res.skipped,
            "bins": cfg.sbc.bins,
            "seconds": t0.elapsed().as_secs_f64(),
        }),
    )
}

pub fn cmd_mcmc(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let dir = out(cfg)?;
    let mdir = dir.join("mcmc");
    std::fs::create_dir_all(&mdir)?;
    let problem = Problem::new(cfg)?;
    let obs = match load_observations(cfg) {
        Ok(o) => o,
        Err(_) => observations(&problem, cfg.seed, cfg.eval.n_observations)?,
    };
    let mut runs = Vec::new();
    for (i, o) in obs.iter().enumerate() {
        let run = run_mcmc(&problem, &o.x, &cfg.mcmc, &mut stream(cfg.seed, "mcmc", i as u64))?;
        let n = run.chains.flat().len().min(cfg.sampling.n_samples.max(1));
        DatasetFile::from_groups(
            header(cfg, cfg.hash(), json!({ "observation": i, "sampler": "aies" })),
            &[("sample", &run.draws(&problem, n))],
        )?
        .save(&mdir.join(format!("chain_{i}.bin")))?;
        let total = run.warmup_secs + run.sampling_secs;
        runs.push(json!({
            "observation": i,
            "walkers": run.chains.n_walkers,
            "steps": run.chains.samples.len(),
            "acceptance": run.chains.acceptance,
            "stretch_acceptance": run.chains.stretch_acceptance,
            "de_acceptance": run.chains.de_acceptance,
            "ess": run.ess,
            "warmup_seconds": run.warmup_secs,
            "sampling_seconds": run.sampling_secs,
            "seconds_per_1000_ess": total * 1000.0 / run.ess.max(1e-12),
        }));
    }
    write_json(&dir.join("mcmc.json"), &ResultMeta::new("mcmc", cfg), json!({ "runs": runs }))
}
