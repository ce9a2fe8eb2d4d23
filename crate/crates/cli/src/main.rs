mod commands;
mod dataset;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exit::Failure;

/// Experiments for multimodal training with unimodal deployment on
/// synthetic audio-visual scenes.
///
/// Any config key can be overridden with trailing dotted assignments, e.g.
/// `mutud train --train.seed=7 model.variant=audio_only`.
#[derive(Debug, Parser)]
#[command(name = "mutud", version)]
struct Cli {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train and test scenes (WAV pairs, JSON sidecars, manifest).
    Generate {
        /// Dataset directory [default: <io.out_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train the configured variant; writes checkpoint, metrics and config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace an existing run with the same config hash.
        #[arg(long)]
        force: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Per-SNR SI-SDR improvement of a checkpoint on the test scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV output [default: eval.csv beside the checkpoint].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs from the resolved config.
        #[arg(long)]
        force: bool,
    },
    /// Train MUTUD at every codebook size of the ablation grid.
    AblateCodebook {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Efficiency, similarity, codebook-usage and separation reports.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate { out, overrides } => commands::generate(config, &overrides, out),
        Command::Train { data, force, overrides } => commands::train(config, &overrides, data, force),
        Command::Eval { checkpoint, data, out, force } => commands::eval(&checkpoint, data, out, force),
        Command::AblateCodebook { data, overrides } => commands::ablate(config, &overrides, data),
        Command::Report { checkpoint, data } => commands::report(&checkpoint, data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.code())
        }
    }
}
