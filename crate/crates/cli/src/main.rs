//! `dsmdp` command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O or parse failure.
//! Verbosity follows the `DSMDP_LOG` environment variable (`info`, `debug`, ...).

mod commands;
mod goldens;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsmdp::KlSignConvention;

#[derive(Debug, Parser)]
#[command(
    name = "dsmdp",
    version,
    about = "Gradient attribution and calibration for a two-stage decision-sampling policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Recompute the worked-example attribution tables and compare against the published values.
    Goldens(GoldensArgs),
    /// Sample trajectories from a fixed policy and write them as JSONL.
    Simulate(SimulateArgs),
    /// Run GRPO-style training and write the per-step trace.
    Train(CommonArgs),
    /// Expected and per-trajectory gradient attribution, with a length sweep.
    Attribute(AttributeArgs),
    /// Fit the three-parameter accuracy model to trajectory records.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Convention {
    #[value(name = "appendixc", alias = "appendix_c")]
    AppendixC,
    Section3,
}

impl From<Convention> for KlSignConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::AppendixC => KlSignConvention::AppendixC,
            Convention::Section3 => KlSignConvention::Section3,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` or JSON config file; a run manifest is also accepted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "dsmdp-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Overrides the KL sign convention.
    #[arg(long, value_enum)]
    pub convention: Option<Convention>,
    /// Print the resolved config as `key = value` text and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GoldensArgs {
    #[arg(long, value_enum, default_value_t = Convention::AppendixC)]
    pub convention: Convention,
    /// Writes the comparison table and a manifest here when given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Test mode: shift θ_s by this amount before recomputing.
    #[arg(long, hide = true, allow_hyphen_values = true)]
    pub perturb: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write the KL Q-value table of the configured trajectory.
    #[arg(long)]
    pub dump_qvalues: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trajectory records, one JSON object per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Bootstrap resamples.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Report each `task` label separately.
    #[arg(long)]
    pub by_task: bool,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Parse(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) | CliError::Parse(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Parse(m) => write!(f, "parse error: {m}"),
        }
    }
}

impl From<dsmdp::Error> for CliError {
    fn from(e: dsmdp::Error) -> Self {
        match e {
            dsmdp::Error::Parse { .. } => CliError::Parse(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Parse(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSMDP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Goldens(a) => goldens::run(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Attribute(a) => commands::attribute_cmd(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsmdp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
