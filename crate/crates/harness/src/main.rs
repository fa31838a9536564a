use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use deskdrive::commands;
use deskdrive::config::EvalSource;
use deskdrive::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "deskdrive", version, about = "Diffusion planner with a learned reward model, end to end")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rl.w_il=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, anchor vocabularies and the labeled reward dataset.
    GenData(Common),
    /// Stage 1: imitation pretraining of the policy.
    Pretrain(Common),
    /// Stage 2: train the reward world model.
    TrainRwm(Common),
    /// Stage 3: PPO fine-tuning against the reward world model.
    RlFinetune(Common),
    /// Score a policy checkpoint (or a baseline) on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_source)]
        source: Option<EvalSource>,
    },
    /// Fine-tune once per imitation weight and tabulate the results.
    AblateWil {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights, e.g. `1.0,0.5,0.1`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Re-score a reward-sample file with the metric oracle.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_source(s: &str) -> Result<EvalSource, String> {
    match s {
        "policy" => Ok(EvalSource::Policy),
        "expert" => Ok(EvalSource::Expert),
        "constant-velocity" => Ok(EvalSource::ConstantVelocity),
        _ => Err(format!("unknown source `{s}` (policy, expert, constant-velocity)")),
    }
}

fn load(c: &Common) -> Result<RunConfig, HarnessError> {
    RunConfig::load(c.config.as_deref(), &c.overrides)
}

fn emit<T: Serialize>(r: Result<T, HarnessError>) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string(&r?)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(c) => emit(commands::gen_data(&load(&c)?)),
        Command::Pretrain(c) => emit(commands::pretrain(&load(&c)?)),
        Command::TrainRwm(c) => emit(commands::train_rwm_cmd(&load(&c)?)),
        Command::RlFinetune(c) => emit(commands::rl_finetune(&load(&c)?)),
        Command::Eval {
            common,
            checkpoint,
            source,
        } => {
            let mut cfg = load(&common)?;
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            if let Some(s) = source {
                cfg.eval.source = s;
            }
            emit(commands::eval(&cfg))
        }
        Command::AblateWil { common, values } => {
            let mut cfg = load(&common)?;
            if let Some(v) = values {
                cfg.ablate.values = v;
            }
            cfg.validate()?;
            emit(commands::ablate_wil(&cfg))
        }
        Command::Score {
            common,
            input,
            output,
        } => emit(commands::score(&load(&common)?, input.as_deref(), output.as_deref())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
