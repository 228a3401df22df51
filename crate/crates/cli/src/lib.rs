//! Command-line workbench for the attribution pipeline.
//!
//! Every subcommand reads a config, opens the run directory named by the
//! config hash and writes its outputs there, skipping work whose outputs
//! already exist.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "astra-tda",
    version,
    about = "Influence-based training data attribution for small MLPs"
)]
pub struct Cli {
    /// Experiment config; defaults to `config.ini` inside `--run-dir`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `$ASTRA_TDA_RUN_ROOT/<config hash prefix>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

/// Static influence solver choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ekfac,
    Astra,
    Sni,
    Identity,
}

/// Iterative solver choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IterativeMethod {
    Astra,
    Sni,
}

/// Per-segment inverse of the unrolled attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceMethod {
    Ekfac,
    Astra,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or load) the dataset and hold out queries.
    GenData,
    /// Train the primary model and store its checkpoints.
    Train,
    /// Retrain on every mask subset to build the ground truth.
    RetrainGrid {
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit the curvature state at the final parameters.
    Ekfac,
    /// Solve one query's system and write the objective trace.
    IhvpSolve {
        #[arg(long, value_enum, default_value = "astra")]
        method: IterativeMethod,
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Try every step size of the sweep grid and keep the best.
        #[arg(long)]
        lr_sweep: bool,
    },
    /// Static influence scores.
    Attribute {
        #[arg(long, value_enum)]
        method: Method,
        /// Number of independently trained models to average.
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Segment-unrolled scores over the training trajectory.
    SourceAttribute {
        #[arg(long, value_enum)]
        method: SourceMethod,
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a stored attribution against the ground truth.
    Lds {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        /// Evaluate the segment-unrolled scores (ekfac or astra only).
        #[arg(long)]
        source: bool,
    },
    /// Per-eigenvalue-bin objective and LDS curves of both solvers.
    CurvatureScan,
    /// Effective damping of the truncated series over a spectrum grid.
    NeumannDamping,
}

/// What a command did.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done {
        message: String,
        artifacts: Vec<PathBuf>,
    },
    /// Outputs already present; nothing was recomputed.
    Skipped { message: String },
}

impl Outcome {
    pub fn message(&self) -> &str {
        match self {
            Outcome::Done { message, .. } | Outcome::Skipped { message } => message,
        }
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    commands::execute(cli)
}
