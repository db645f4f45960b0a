//! Command-line front end: config resolution, run directories and manifests
//! around the `trajkd` library.

mod ablate;
mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod workspace;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use ablate::{AblationConfig, Grid, GridCell};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "trajkd",
    version,
    about = "Multimodal trajectory distillation on synthetic crowds",
    args_override_self = true
)]
pub struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Skip the run if the output manifest already records it with intact artifacts.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Run on the current thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// TOML config file; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set arch.dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenes and write one JSON file per scene.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a teacher on its full modality set.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the manifest goes to its directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a student against a frozen teacher checkpoint.
    DistillStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint, or `constant-velocity`, on a dataset.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label in reports.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare evaluation directories; the first input is the reference row.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a grid of KD toggles, student modalities and mode counts.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run up to this many grid cells as parallel child processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, hide = true)]
        cell: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .parse_default_env()
        .try_init();
    match commands::dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
