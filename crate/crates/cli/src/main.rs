//! `masc`: train, calibrate and apply the step-level trace anomaly detector,
//! and run fault-injection experiments.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use masc::MascError;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { code: 3, message: msg.into() }
    }
}

impl From<MascError> for CliError {
    fn from(e: MascError) -> Self {
        let code = match &e {
            MascError::Config(_)
            | MascError::Precondition(_)
            | MascError::Shape(_)
            | MascError::CorruptCheckpoint(_)
            | MascError::CheckpointVersion { .. }
            | MascError::Transport { .. } => 2,
            MascError::Diverged(_) => 4,
            MascError::Parse { .. } | MascError::Validation(_) | MascError::Degenerate(_) | MascError::Io(_) => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "masc", version, about = "Step-level anomaly detection and correction for multi-agent traces")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL trace file and summarize it.
    Ingest(IngestArgs),
    /// Train a detector on normal traces.
    Train(TrainArgs),
    /// Set the anomaly threshold from normal traces.
    Calibrate(CalibrateArgs),
    /// Score every step of a trace file.
    Score(ScoreArgs),
    /// Compute detection metrics on labeled traces.
    Eval(EvalArgs),
    /// Embedding-space and error-position diagnostics.
    Diag(DiagArgs),
    /// Run the fault-injection simulator.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Hc,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TopologyArg {
    Chain,
    Complete,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorruptionArg {
    MisleadingTemplate,
    Scramble,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrototypeInitArg {
    Gaussian,
    EmbeddingMean,
}

#[derive(Args)]
pub struct IngestArgs {
    /// JSONL trace file.
    #[arg(long)]
    pub traces: PathBuf,
    /// Reject unknown keys instead of ignoring them.
    #[arg(long)]
    pub strict: bool,
    /// Write the parsed traces back out in canonical form.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON path (stdout when absent).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Embedder and backbone selection shared by training-like commands.
#[derive(Args, Clone, Default)]
pub struct ModelArgs {
    /// Embedding dimension d_e.
    #[arg(long)]
    pub d_e: Option<usize>,
    /// Context dimension d_h.
    #[arg(long)]
    pub d_h: Option<usize>,
    /// Frozen backbone width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Frozen backbone depth.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Seed for the frozen backbone weights.
    #[arg(long)]
    pub backbone_seed: Option<u64>,
    /// Embedding service base URL (switches to the remote embedder).
    #[arg(long, requires = "embed_model")]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Backbone service base URL (switches to the remote backbone).
    #[arg(long, requires = "backbone_model")]
    pub backbone_endpoint: Option<String>,
    #[arg(long)]
    pub backbone_model: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub traces: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report JSON path (stdout when absent).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON or TOML training config, applied over the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hc")]
    pub profile: ProfileArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the prototype alignment loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Append the ground-truth answer to the query.
    #[arg(long)]
    pub with_gt: bool,
    /// Drop each labeled trajectory's steps from its first error onwards.
    #[arg(long)]
    pub exclude_labeled_steps: bool,
    #[arg(long, value_enum)]
    pub prototype_init: Option<PrototypeInitArg>,
    /// Score weights stored in the checkpoint.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Normal traces to calibrate on.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub quantile: f64,
    #[arg(long, conflicts_with = "normalize")]
    pub alpha: Option<f64>,
    #[arg(long, conflicts_with = "normalize")]
    pub beta: Option<f64>,
    /// Put both score terms on unit scale over the calibration traces.
    #[arg(long)]
    pub normalize: bool,
    /// Output checkpoint (defaults to overwriting the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    /// CSV output path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Threshold override; accepts `inf`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Expected embedding dimension; must match the checkpoint.
    #[arg(long)]
    pub d_e: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Labeled traces.
    #[arg(long)]
    pub traces: PathBuf,
    /// Score CSV from `masc score`.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub scores: Option<PathBuf>,
    /// Score the traces with this checkpoint instead of reading a CSV.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Threshold for flag accuracy (defaults to the checkpoint's).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Histogram CSV output.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    /// Metrics JSON path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DiagArgs {
    /// Labeled traces.
    #[arg(long)]
    pub traces: PathBuf,
    /// Hashing embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub d_e: usize,
    /// Bins of the normalized error-position histogram.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON or TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Topologies to run (repeat or comma-separate).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub topology: Vec<TopologyArg>,
    #[arg(long, value_enum)]
    pub fault: Option<Switch>,
    #[arg(long, value_enum)]
    pub corruption: Option<CorruptionArg>,
    #[arg(long, value_enum)]
    pub masc: Option<Switch>,
    /// Detector checkpoint; without one a detector is trained on clean runs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fixed threshold; accepts `inf`.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long, value_enum, default_value = "hc")]
    pub profile: ProfileArg,
    #[arg(long)]
    pub fixtures: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub edge_seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Report JSON path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-cell CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// JSONL dump of every run's committed trajectory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Diag(a) => commands::diag(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
