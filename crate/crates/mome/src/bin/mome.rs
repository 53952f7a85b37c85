//! Thin command-line front end over the library's experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mome::config::load_config;
use mome::runner::{run, Command as RunnerCommand};

#[derive(Parser)]
#[command(
    name = "mome",
    about = "Two-stage mixture-of-task-experts transfer learning experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one expert + prompt artifact per configured source task.
    TrainSource { config: PathBuf },
    /// Adapt to the configured target task on top of trained sources.
    TrainTarget { config: PathBuf },
    /// Evaluate a saved artifact on its task's test split.
    Evaluate {
        config: PathBuf,
        /// Checkpoint to evaluate; defaults to the config's target artifact.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Run the 4-arm x seeds ablation matrix and emit a summary table.
    Ablate { config: PathBuf },
    /// Sweep few-shot adaptation at k = 4, 16, 32 over every seed.
    Fewshot { config: PathBuf },
    /// Export per-layer mean gate weights measured at inference time.
    ExportGates {
        config: PathBuf,
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, config_path, artifact) = match &cli.command {
        Command::TrainSource { config } => (RunnerCommand::TrainSource, config, None),
        Command::TrainTarget { config } => (RunnerCommand::TrainTarget, config, None),
        Command::Evaluate { config, artifact } => {
            (RunnerCommand::Evaluate, config, artifact.as_deref())
        }
        Command::Ablate { config } => (RunnerCommand::Ablate, config, None),
        Command::Fewshot { config } => (RunnerCommand::Fewshot, config, None),
        Command::ExportGates { config, artifact } => {
            (RunnerCommand::ExportGates, config, artifact.as_deref())
        }
    };
    let cfg = match load_config(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cmd, &cfg, artifact) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
