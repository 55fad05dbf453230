//! `ran` — train, evaluate, and run the aligned trajectory predictor.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Precision, RunConfig};

#[derive(Parser)]
#[command(
    name = "ran",
    about = "Recurrent aligned network for cross-domain trajectory prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured source domains; writes model.ckpt and
    /// train_log.csv into the output directory.
    Train {
        /// Path to the key=value run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured test domain; writes
    /// metrics.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written by `ran train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict futures for every observation window in a trajectory file;
    /// writes a CSV with one row per (window, head, step).
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory file (frame_id agent_id x y per line).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path (default: <out>/predictions.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Materialize every configured synthetic domain to a trajectory file.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export per-window final hidden states with a 2D projection as CSV +
    /// SVG, for eyeballing domain overlap.
    #[command(name = "export-features")]
    ExportFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> ran_core::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F64 => commands::cmd_train::<f64>(&cfg),
                Precision::F32 => commands::cmd_train::<f32>(&cfg),
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F64 => commands::cmd_eval::<f64>(&cfg, &checkpoint),
                Precision::F32 => commands::cmd_eval::<f32>(&cfg, &checkpoint),
            }
        }
        Command::Predict {
            config,
            checkpoint,
            input,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F64 => commands::cmd_predict::<f64>(&cfg, &checkpoint, &input, output),
                Precision::F32 => commands::cmd_predict::<f32>(&cfg, &checkpoint, &input, output),
            }
        }
        Command::Synth { config } => commands::cmd_synth(&RunConfig::load(&config)?),
        Command::ExportFeatures { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F64 => commands::cmd_export_features::<f64>(&cfg, &checkpoint),
                Precision::F32 => commands::cmd_export_features::<f32>(&cfg, &checkpoint),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_usage() { 1 } else { 2 })
        }
    }
}
