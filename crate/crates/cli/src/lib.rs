//! Experiment harness behind the `mixforge` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod runs;
pub mod visualize;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mixforge::training::Strategy;
use serde_json::{json, Value};

pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "mixforge", version, about = "Learned sample mixing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Strategy, or a comma-separated sweep (simple, mixup, cutmix,
    /// transformmix, stn-only, mpn-only, softmax-cam).
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<Strategy>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher classifier without mixing.
    TrainTeacher(RunArgs),
    /// Fit the mixing module against a trained teacher.
    TrainMixer(RunArgs),
    /// Train task networks for one or more strategies.
    TrainTask(RunArgs),
    /// Train task networks with a mixer trained on another dataset.
    Transfer(RunArgs),
    /// Render mixing grids for a trained mixer.
    Visualize(RunArgs),
    /// Time learned mixing against iterative mask optimization.
    Bench(RunArgs),
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::TrainTeacher(a)
            | Command::TrainMixer(a)
            | Command::TrainTask(a)
            | Command::Transfer(a)
            | Command::Visualize(a)
            | Command::Bench(a) => a,
        }
    }
}

pub fn run(command: &Command) -> anyhow::Result<Value> {
    let args = command.args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply_overrides(args.seed, &args.strategy)?;
    match command {
        Command::TrainTeacher(_) => commands::train_teacher(&cfg),
        Command::TrainMixer(_) => commands::train_mixer_cmd(&cfg),
        Command::TrainTask(_) => commands::train_task_cmd(&cfg),
        Command::Transfer(_) => commands::transfer(&cfg),
        Command::Visualize(_) => visualize::visualize(&cfg),
        Command::Bench(_) => bench::bench(&cfg),
    }
}

/// `{"error": {"kind", "message"}}`; the kind is the library's error tag
/// when the failure came from it.
pub fn error_json(err: &anyhow::Error) -> Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<mixforge::Error>())
        .map_or("cli", mixforge::Error::kind);
    json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
        }
    })
}
