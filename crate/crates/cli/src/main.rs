mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Pose-driven human video synthesis with separate foreground and
/// background control.
#[derive(Debug, Parser)]
#[command(name = "cfsynth", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Command configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed recorded in every artifact; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or report file for `evaluate`); created if absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// One of error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    /// Default directory of clip manifests for training.
    #[arg(long, global = true, env = "CFSYNTH_DATA_ROOT", hide_env_values = true)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic clips from a dataset spec (`[[clip]]` tables).
    GenData,
    /// Train the codec (when none is given) and one diffusion phase.
    Train,
    /// Render pose maps and composite previews for a job file.
    RenderPose,
    /// Synthesize the frames of a job file from a model checkpoint.
    Synthesize {
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare predicted frames against ground truth and write a report.
    Evaluate {
        /// Directory of predicted PNG frames.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference PNG frames, or a clip directory.
        #[arg(long)]
        gt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.global.log_level).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
