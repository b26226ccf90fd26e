//! crowdcell: cell-based anomaly detection for crowded surveillance video.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure, 2 configuration/usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "crowdcell", version, about = "Cell-based video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set detect.threshold=0.05. Repeatable;
    /// flags take precedence over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the background model and per-cell models on the training sequences.
    Train(ConfigArgs),
    /// Detect anomalies in the test sequences using a trained model file.
    Detect(ConfigArgs),
    /// Compute ROC curves and equal error rates from detection outputs.
    Eval(ConfigArgs),
    /// Render a synthetic scenario into frames, masks and ground truth.
    Synth {
        /// Scenario description file.
        spec: PathBuf,
        /// Output directory.
        out_dir: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = RunConfig::from_sources(args.config.as_deref(), &args.set)?;
            commands::cmd_train(&cfg)
        }
        Command::Detect(args) => {
            let cfg = RunConfig::from_sources(args.config.as_deref(), &args.set)?;
            commands::cmd_detect(&cfg)
        }
        Command::Eval(args) => {
            let cfg = RunConfig::from_sources(args.config.as_deref(), &args.set)?;
            commands::cmd_eval(&cfg)
        }
        Command::Synth { spec, out_dir } => commands::cmd_synth(&spec, &out_dir),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
