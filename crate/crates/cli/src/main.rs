//! `icsm`: synthesize cohorts, run simulations, analyze logs and compare
//! configurations.
//!
//! Exit codes: 0 on success, 2 on usage or input errors, 3 when the model
//! backend fails.

mod analyze;
mod manifest;
mod report;
mod run;
mod synthesize;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icsm_core::analysis::AnalysisError;
use icsm_core::backend::BackendError;
use icsm_core::experiment::ExperimentError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(error: ExperimentError) -> Self {
        match &error {
            // gaps in mock fixtures or weights are input problems, not outages
            ExperimentError::Backend {
                error: BackendError::Config(_) | BackendError::MissingFixture(_) | BackendError::MissingWeight(_),
                ..
            } => CliError::Input(error.to_string()),
            ExperimentError::Backend { .. } => CliError::Backend(error.to_string()),
            _ => CliError::Input(error.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(error: AnalysisError) -> Self {
        CliError::Input(error.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(error: BackendError) -> Self {
        match error {
            BackendError::Config(_) | BackendError::MissingFixture(_) | BackendError::MissingWeight(_) => {
                CliError::Input(error.to_string())
            }
            other => CliError::Backend(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Wraps an I/O error with the path it concerns.
pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "icsm", version, about = "LLM-agent election simulation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build one cohort file per configured state from census marginals.
    Synthesize(SynthesizeArgs),
    /// Query every agent for every round and append to the run log.
    Run(RunArgs),
    /// Compute a report from a run log.
    Analyze(AnalyzeArgs),
    /// Judge configuration B against baseline A on the same benchmark.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Census table; overrides `census` in the config.
    #[arg(long)]
    pub census: Option<PathBuf>,
    /// Cohort seed; overrides `root_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Agents per state; overrides `cohort_size` (default 1000).
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory; overrides `cohorts`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `rounds`.
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Overrides the parametric mock seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a partial log instead of refusing to touch it.
    #[arg(long)]
    pub resume: bool,
    /// Run log path (default `<experiment_id>.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub report: ReportKind,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run log (JSONL).
    pub log: PathBuf,
    /// Directory for the CSV and text reports.
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Inflation applied to the benchmark errors.
    #[arg(long, default_value_t = icsm_core::analysis::DEFAULT_INFLATION)]
    pub inflation: f64,
    /// Inflate each state's own benchmark error instead of the range.
    #[arg(long)]
    pub per_state: bool,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Per-state, per-round candidate shares.
    Shares {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        round: Option<u32>,
        /// Adds actuals, margins and winner calls.
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Spread of each state's share across rounds.
    Reliability {
        #[command(flatten)]
        common: Common,
    },
    /// Margins against actuals and the inflated benchmark threshold.
    Validity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bench: BenchmarkArgs,
        /// Round to judge (default: the first round in the log).
        #[arg(long)]
        round: Option<u32>,
    },
    /// Share of reasons citing a term after their first sentence.
    Weight {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        term: String,
        #[arg(long)]
        round: Option<u32>,
    },
    /// Association between one identity variable and party support.
    Cramers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variable: String,
        #[arg(long)]
        round: Option<u32>,
    },
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline run log.
    pub log_a: PathBuf,
    /// Adjusted run log.
    pub log_b: PathBuf,
    #[command(flatten)]
    pub bench: BenchmarkArgs,
    #[arg(long)]
    pub round: Option<u32>,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(args) => synthesize::cmd_synthesize(&args),
        Command::Run(args) => run::cmd_run(&args),
        Command::Analyze(args) => analyze::cmd_analyze(args.report),
        Command::Compare(args) => analyze::cmd_compare(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}
