//! `multichunk`: generate demonstrations, train, evaluate, calibrate, plot
//! and ablate multi-frequency chunking policies on the toy benchmark.

mod ablation;
mod commands;
mod error;
mod plot;
mod results;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::Value;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "multichunk", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = settings::parse_override, global = true)]
    sets: Vec<(String, Value)>,
    /// Dataset root.
    #[arg(long, env = "MULTICHUNK_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,
    /// Directory for checkpoints, results and traces.
    #[arg(long, env = "MULTICHUNK_RUN_DIR", global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to these tasks. Repeatable.
    #[arg(long = "task", global = true)]
    tasks: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record scripted demonstrations for each task.
    GenDemos {
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a denoiser per task, writing periodic and final checkpoints.
    Train {
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll a checkpoint out and append the report to the results file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::EntropyGated)]
        mode: Mode,
        #[arg(long)]
        episodes: Option<usize>,
        /// Interior entropy thresholds, ascending, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        thresholds: Option<Vec<f64>>,
        /// Write one JSONL trace per episode here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Derive thresholds from entropy percentiles of gated rollouts.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Where to write the `thresholds = [...]` snippet.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy curve of one trace as SVG and CSV.
    PlotEntropy {
        #[arg(long)]
        trace: PathBuf,
        /// Output path without extension; defaults to the trace path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid.
    Ablate {
        #[arg(long, value_enum, default_value_t = Mode::EntropyGated)]
        mode: Mode,
        #[arg(long)]
        episodes: Option<usize>,
        /// Calibrate thresholds for each trained variant before evaluating.
        #[arg(long)]
        calibrate: bool,
        /// Only run variants whose name contains one of these.
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Print the results table from a results file.
    Table {
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    EntropyGated,
    FixedHigh,
    FixedMid,
    FixedLow,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::EntropyGated => "entropy-gated",
            Mode::FixedHigh => "fixed-high",
            Mode::FixedMid => "fixed-mid",
            Mode::FixedLow => "fixed-low",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenDemos { force } => commands::gen_demos(&cli.common, force),
        Command::Train { resume } => commands::train(&cli.common, resume.as_deref()),
        Command::Eval {
            checkpoint,
            mode,
            episodes,
            thresholds,
            trace_dir,
        } => commands::eval(
            &cli.common,
            &checkpoint,
            mode,
            episodes,
            thresholds,
            trace_dir.as_deref(),
        ),
        Command::Calibrate {
            checkpoint,
            percentiles,
            episodes,
            out,
        } => commands::calibrate(&cli.common, &checkpoint, percentiles, episodes, out.as_deref()),
        Command::PlotEntropy { trace, out } => commands::plot_entropy(&trace, out.as_deref()),
        Command::Ablate {
            mode,
            episodes,
            calibrate,
            only,
        } => commands::ablate(&cli.common, mode, episodes, calibrate, &only),
        Command::Table { results } => commands::table(&cli.common, results.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if matches!(e, CliError::User(_)) {
                "error"
            } else {
                "internal error"
            };
            eprintln!("{kind}: {e}");
            e.exit_code()
        }
    }
}
