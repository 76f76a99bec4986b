//! Command line front end: train / eval / bench / sweep / export-configs
//! over a single TOML run configuration.
//!
//! Exit codes: 0 on success, 1 on configuration validation failure, 2 on
//! runtime errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "detrs", version, about = "Rescaled detector families: train, evaluate, and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector from a run config.
    Train {
        /// Path to the run config TOML.
        config: PathBuf,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps (smoke runs).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint: AP metrics plus a per-image detections dump.
    Eval {
        config: PathBuf,
        /// Checkpoint directory (weights.bin + state.json + recipe.json).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Latency benchmark: half/single precision, with and without
    /// postprocessing, plus the postprocess share.
    Bench {
        config: PathBuf,
        /// Optional checkpoint to benchmark instead of fresh weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured sweep grid; resumable, partial failures recorded.
    Sweep { config: PathBuf },
    /// Write one ready-to-run config per published model-scale row.
    ExportConfigs {
        #[arg(long, default_value = "exported-configs")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            max_steps,
        } => commands::cmd_train(&config, resume.as_deref(), max_steps),
        Command::Eval { config, checkpoint } => commands::cmd_eval(&config, &checkpoint),
        Command::Bench { config, checkpoint } => commands::cmd_bench(&config, checkpoint.as_deref()),
        Command::Sweep { config } => commands::cmd_sweep(&config),
        Command::ExportConfigs { out } => commands::cmd_export_configs(&out),
    }
}

fn is_validation_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<detrs::DetError>(),
            Some(detrs::DetError::InvalidConfig { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
