use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simflow_core::harness::{ExperimentConfig, HarnessError, Stage, PROFILES};

#[derive(Parser)]
#[command(name = "simflow", version, about = "Flow-matching posterior estimation with simulator feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameters from the prior and simulate a training set.
    Generate(Common),
    /// Train (or resume training) the base flow.
    Train(Common),
    /// Finetune a control network on top of the frozen base flow.
    Finetune(Common),
    /// Draw posterior samples for the held-out observations.
    Sample(Common),
    /// Score samples against reference posteriors (C2ST, MMD, or χ² for lensing).
    Evaluate(Common),
    /// Simulation-based calibration of the base flow.
    Sbc(Common),
    /// Run the ensemble sampler on the held-out observations.
    Mcmc(Common),
    /// Print a configuration as JSON.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Bundled profile name.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step count of the stage: optimizer steps for train and finetune,
    /// Euler steps for sample and sbc, post-warmup steps for mcmc.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn load(&self, stage: Option<Stage>) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match (&self.config, &self.profile) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::from_json(&text)?
            }
            (None, Some(name)) => ExperimentConfig::profile(name)?,
            (None, None) => {
                return Err(HarnessError::Config(format!("pass --config FILE or --profile one of {}", PROFILES.join(", "))))
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(n) = self.steps {
            match stage {
                Some(Stage::Train) => cfg.train.steps = n,
                Some(Stage::Finetune) => match cfg.control.as_mut() {
                    Some(c) => c.finetune.steps = n,
                    None => return Err(HarnessError::Config("--steps given but the config has no control section".into())),
                },
                Some(Stage::Sample | Stage::Sbc) => cfg.sampling.euler_steps = n,
                Some(Stage::Mcmc) => cfg.mcmc.aies.n_steps = n,
                _ => return Err(HarnessError::Config("--steps has no meaning for this command".into())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String, HarnessError> {
    let (common, stage) = match &cli.command {
        Command::Generate(c) => (c, Stage::Generate),
        Command::Train(c) => (c, Stage::Train),
        Command::Finetune(c) => (c, Stage::Finetune),
        Command::Sample(c) => (c, Stage::Sample),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::Sbc(c) => (c, Stage::Sbc),
        Command::Mcmc(c) => (c, Stage::Mcmc),
        Command::Config(c) => return Ok(c.load(None)?.to_json()),
    };
    let cfg = common.load(Some(stage))?;
    Ok(format!("{:#}", stage.run(&cfg)?))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("simflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
