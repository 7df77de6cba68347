//! `pkoop`: config-driven experiments for parametric Koopman models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<pkoopman::Error> for CliError {
    fn from(e: pkoopman::Error) -> Self {
        use pkoopman::Error as E;
        match e {
            E::NonFinite(_) | E::SingularGram(_) | E::StepUnderflow { .. } | E::Diverged { .. } | E::PlantBlowUp { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "pkoop", version, about = "Parametric Koopman models: data, training, prediction and control")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Generate the test set described by the evaluation block.
        #[arg(long)]
        test: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the configured model; also writes `<out>.loss.csv` and `<out>.timing.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-step predictions for every test trajectory.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score per-parameter banks by their nearest training parameter.
        #[arg(long)]
        nearest_neighbour: bool,
    },
    /// Relative error curves; also writes `<out>.summary.csv`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// One or more checkpoints, compared on the same test set.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nearest_neighbour: bool,
    },
    /// Closed-loop tracking with receding-horizon control on the true plant.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include per-step optimizer wall time (not reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Singular values of the sampled generator matrix and a rank verdict.
    Controllability {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one checkpoint per grid cell of the sweep block.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a dataset file as CSV.
    ExportCsv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::GenerateData { common, test, out } => commands::generate_data(&common.config, common.seed, test, &out),
        Command::Train { common, data, out } => commands::train(&common.config, common.seed, &data, &out),
        Command::Predict { common, checkpoint, data, out, nearest_neighbour } => {
            commands::predict(&common.config, common.seed, &checkpoint, &data, &out, nearest_neighbour)
        }
        Command::Evaluate { common, checkpoint, data, out, nearest_neighbour } => {
            commands::evaluate(&common.config, common.seed, &checkpoint, &data, &out, nearest_neighbour)
        }
        Command::Control { common, checkpoint, out, timing } => commands::control(&common.config, common.seed, &checkpoint, &out, timing),
        Command::Controllability { checkpoint, samples, seed, threshold, out } => {
            commands::controllability(&checkpoint, samples, seed, threshold, &out)
        }
        Command::Sweep { common, data, out } => commands::sweep(&common.config, common.seed, &data, &out),
        Command::ExportCsv { data, out } => commands::export_csv(&data, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pkoop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
