//! Command-line driver: `verify`, `analyze`, `sweep`, `skew`, `schedule`.

mod commands;
mod config;
mod render;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::error::MoeError;

pub use commands::{cmd_analyze, cmd_schedule, cmd_skew, cmd_sweep, cmd_verify};
pub use config::{Format, FusedMode, RunConfig};
pub use render::{SweepRow, SWEEP_COLUMNS, SWEEP_SCHEMA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "moe-dispatch", version, about = "MoE dispatch pipeline reference and performance model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the tiled pipeline against the dense oracle on small random layers.
    Verify(VerifyArgs),
    /// Per-stage FLOPs, bytes, roofline verdicts and traffic for one model.
    Analyze(CommonArgs),
    /// Model predictions over batch sizes or the expert-scaling grid.
    Sweep(SweepArgs),
    /// Imbalance and predicted cost under skewed routing.
    Skew(SkewArgs),
    /// Dump expert offsets and the block schedule as JSON.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Model preset (mixtral-8x7b, mixtral-8x22b, deepseek-v3, qwen2-moe-57b).
    #[arg(long)]
    pub model: Option<String>,
    /// Hardware preset (a100, mi300x).
    #[arg(long)]
    pub hardware: Option<String>,
    /// Peak FLOP/s override; required for mi300x.
    #[arg(long)]
    pub peak_flops: Option<f64>,
    /// Token batch size; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    pub batch: Vec<usize>,
    #[arg(long)]
    pub block_m: Option<usize>,
    #[arg(long)]
    pub block_n: Option<usize>,
    #[arg(long)]
    pub block_k: Option<usize>,
    #[arg(long, value_enum)]
    pub fused: Option<FusedMode>,
    /// Routing distribution: `uniform` or `zipf:<alpha>`; repeatable.
    #[arg(long)]
    pub skew: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; flags take precedence over its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random instances per batch size.
    #[arg(long, default_value_t = 4)]
    pub instances: usize,
    /// Hidden size of the shrunken layer.
    #[arg(long, default_value_t = 32)]
    pub verify_dim: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sweep the expert-scaling grid at the model's hidden size.
    #[arg(long)]
    pub expert_grid: bool,
    /// Emit per-stage rows in addition to the layer total.
    #[arg(long)]
    pub per_stage: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SkewArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Seeds averaged into the imbalance metrics.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Emit per-stage rows in addition to the layer total.
    #[arg(long)]
    pub per_stage: bool,
    /// Save the base-seed routing as JSON. With several (distribution, batch)
    /// cells the name gets a `-<dist>-b<batch>` suffix.
    #[arg(long)]
    pub dump_routing: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Explicit expert histogram, e.g. `5,0,7`.
    #[arg(long, value_delimiter = ',', conflicts_with = "routing")]
    pub counts: Option<Vec<usize>>,
    /// Replay a routing dump written by `skew --dump-routing`.
    #[arg(long)]
    pub routing: Option<PathBuf>,
}

/// A rendered report and where it should go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub out: Option<PathBuf>,
    pub exit_code: i32,
}

impl Report {
    pub(crate) fn ok(text: String, out: Option<PathBuf>) -> Self {
        Self {
            text,
            out,
            exit_code: EXIT_OK,
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    match &cli.command {
        Command::Verify(a) => cmd_verify(&RunConfig::resolve(&a.common)?, a.instances, a.verify_dim),
        Command::Analyze(a) => cmd_analyze(&RunConfig::resolve(a)?),
        Command::Sweep(a) => cmd_sweep(&RunConfig::resolve(&a.common)?, a.expert_grid, a.per_stage),
        Command::Skew(a) => cmd_skew(
            &RunConfig::resolve(&a.common)?,
            a.seeds,
            a.per_stage,
            a.dump_routing.as_deref(),
        ),
        Command::Schedule(a) => cmd_schedule(
            &RunConfig::resolve(&a.common)?,
            a.counts.as_deref(),
            a.routing.as_deref(),
        ),
    }
}

fn emit(report: &Report) -> Result<(), CliError> {
    match &report.out {
        Some(path) => std::fs::write(path, &report.text).map_err(|e| CliError::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(report.text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli).and_then(|r| emit(&r).map(|_| r.exit_code)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
