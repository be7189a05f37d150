//! Command-line driver: `index`, `select`, `eval` and `sweep`.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::{BackendSpec, CommonArgs, RetrieverSpec, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "icl-select",
    version,
    about = "Validation-based demonstration selection for in-context learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and serialize the BM25 index; validate the embedding store.
    Index(CommonArgs),
    /// Select demonstrations and write selection traces.
    Select {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        test_id: Option<String>,
        #[arg(long)]
        all: bool,
        /// Print the per-candidate L_v / ε / score table.
        #[arg(long)]
        explain: bool,
    },
    /// Run a full evaluation, one report per seed.
    Eval(CommonArgs),
    /// Evaluate once per value of one configuration axis.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    K,
    NShot,
    Ordering,
    ValidationPolicy,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::K => "k",
            Axis::NShot => "n_shot",
            Axis::Ordering => "ordering",
            Axis::ValidationPolicy => "validation_policy",
        }
    }
}

/// Why a command stopped; maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, paths or input data (exit 2).
    Config(String),
    /// The backend cannot be reached or misbehaves (exit 3).
    Unreachable(String),
    /// Nothing could be evaluated (exit 4).
    Total(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Unreachable(_) => 3,
            Failure::Total(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Unreachable(m) => write!(f, "backend unreachable: {m}"),
            Failure::Total(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<icl_core::Error> for Failure {
    fn from(e: icl_core::Error) -> Self {
        use icl_core::Error as E;
        match e {
            E::Transport(_) | E::Status { .. } | E::Protocol(_) => {
                Failure::Unreachable(e.to_string())
            }
            E::MockMiss { .. }
            | E::TokenizerRejection(_)
            | E::GenerationUnsupported(_)
            | E::LengthMismatch(..) => Failure::Total(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Index(common) => commands::cmd_index(&RunConfig::from_args(&common)?),
        Command::Select {
            common,
            test_id,
            all: _,
            explain,
        } => commands::cmd_select(&RunConfig::from_args(&common)?, test_id.as_deref(), explain),
        Command::Eval(common) => commands::cmd_eval(&RunConfig::from_args(&common)?).map(|_| ()),
        Command::Sweep {
            common,
            axis,
            values,
        } => commands::cmd_sweep(&RunConfig::from_args(&common)?, axis, &values).map(|_| ()),
    }
}

/// Path of the per-seed report inside the output directory.
pub fn report_path(out: &std::path::Path, seed: u64) -> PathBuf {
    out.join(format!("report_seed{seed}.json"))
}

/// Path of the per-seed selection trace inside the output directory.
pub fn trace_path(out: &std::path::Path, seed: u64) -> PathBuf {
    out.join(format!("trace_seed{seed}.jsonl"))
}
