//! Operator surface over the reward engine, the trace filter, the loop
//! simulator, and the threshold calculators. Every subcommand is file-in,
//! file-out and deterministic: identical inputs and seeds give byte-identical
//! outputs.
//!
//! Exit codes: 0 success, 2 input/usage error, 3 failed assertion or check,
//! 1 anything unexpected.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctirl_core::extract::ExtractionMode;

#[derive(Debug)]
pub enum CliError {
    /// Bad files, bad flags, bad config: exit 2.
    Input(String),
    /// A requested check did not hold: exit 3.
    CheckFailed(String),
    /// Everything else: exit 1.
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(err: E) -> Self {
        CliError::Internal(err.into())
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "ctirl",
    about = "Deterministic reward engine and self-training loop simulator for structured CTI tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a file of rollouts against a dataset.
    Score(ScoreArgs),
    /// Run the trace acceptance pipeline over a file of candidate traces.
    Filter(FilterArgs),
    /// Train the hashed n-gram quality scorer from labeled examples.
    TrainScorer(TrainScorerArgs),
    /// Run the training-loop simulator from a config file.
    Simulate(SimulateArgs),
    /// Threshold calculators and run-vs-prediction checks.
    Theory(TheoryArgs),
    /// Generate a synthetic dataset for simulations and demos.
    GenDataset(GenDatasetArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Dataset file (newline-delimited task records).
    #[arg(long)]
    dataset: PathBuf,
    /// Rollout file: one {"uid", "completion"} record per line.
    #[arg(long)]
    rollouts: PathBuf,
    /// Extraction regime.
    #[arg(long, value_enum, default_value = "strict")]
    mode: ModeArg,
    /// Alias table for actor-attribution tasks.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Directory of one-ID-per-line catalog files.
    #[arg(long)]
    catalog_dir: Option<PathBuf>,
    /// Truncate completions to this many whitespace tokens (0 disables).
    #[arg(long, default_value_t = 1024)]
    max_response_tokens: usize,
    /// Output file for per-rollout reward records.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Strict,
    Permissive,
}

impl From<ModeArg> for ExtractionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strict => ExtractionMode::Strict,
            ModeArg::Permissive => ExtractionMode::Permissive,
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Trace file: {"uid", "response", "verifier_score"?} records.
    #[arg(long)]
    traces: PathBuf,
    /// Dataset file supplying task text, label reference, and gold labels.
    #[arg(long)]
    context: PathBuf,
    /// Trained scorer weight file; falls back to a constant-pass scorer.
    #[arg(long)]
    scorer: Option<PathBuf>,
    /// Pre-computed quality scores: {"id", "q"} records keyed by
    /// "<uid>:<trace index>".
    #[arg(long)]
    external_scores: Option<PathBuf>,
    /// Extra leakage cues ({"phrases": [...], "regexes": [...]}).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Quality acceptance threshold.
    #[arg(long, default_value_t = 0.5)]
    tau_q: f64,
    /// Alias table for actor-attribution tasks.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Tie-break seed for per-uid selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for verdict records.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainScorerArgs {
    /// Labeled file: {"text", "label": "GOOD"|"BAD"} records.
    #[arg(long)]
    labeled: PathBuf,
    /// Where to write the weight file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 65536)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Held-out fraction per class.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Run config (TOML). Relative paths are also resolved against
    /// $CTIRL_CONFIG_DIR.
    #[arg(long)]
    config: PathBuf,
    /// Force the baseline mode (steps 2-4 disabled).
    #[arg(long)]
    grpo_only: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override rollouts per prompt.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Override the snapshot cadence.
    #[arg(long)]
    snapshot_every: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    #[command(subcommand)]
    command: TheoryCommand,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Print the detectability threshold and derived quantities.
    Params(TheoryParamsArgs),
    /// Compare a simulation run directory against the predictions.
    Check(TheoryCheckArgs),
}

#[derive(Args)]
struct TheoryParamsArgs {
    /// Rollout budget per prompt.
    #[arg(long)]
    k: u64,
    /// Miss-probability target in (0, 1).
    #[arg(long)]
    zeta: f64,
    /// Initial success probability.
    #[arg(long)]
    p0: Option<f64>,
    /// Log-increment per successful distillation step.
    #[arg(long)]
    delta: Option<f64>,
    /// Per-attempt acceptance probability.
    #[arg(long)]
    alpha_exp: Option<f64>,
}

#[derive(Args)]
struct TheoryCheckArgs {
    /// A directory written by `simulate` with snapshots enabled.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    zeta: f64,
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(args) => commands::score::run(args),
        Command::Filter(args) => commands::filter::run(args),
        Command::TrainScorer(args) => commands::train_scorer::run(args),
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Theory(args) => match args.command {
            TheoryCommand::Params(p) => commands::theory::params(p),
            TheoryCommand::Check(c) => commands::theory::check(c),
        },
        Command::GenDataset(args) => commands::gen_dataset::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Internal(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

pub(crate) use {
    FilterArgs as FilterCliArgs, GenDatasetArgs as GenDatasetCliArgs, ScoreArgs as ScoreCliArgs,
    SimulateArgs as SimulateCliArgs, TheoryCheckArgs as TheoryCheckCliArgs,
    TheoryParamsArgs as TheoryParamsCliArgs, TrainScorerArgs as TrainScorerCliArgs,
};
