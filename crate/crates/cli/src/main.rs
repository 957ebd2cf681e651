//! `scakit` command-line front end.
//!
//! Exit codes: 0 success, 1 attack ran but did not recover the key,
//! 2 invalid flags or config, 3 I/O or malformed file, 4 attack-level error,
//! 5 training divergence, 6 incompatible shapes.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{code, CliError};

#[derive(Parser)]
#[command(name = "scakit", version, about = "Side-channel attack workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace set.
    Gen(GenArgs),
    /// Run a classical attack and write the ranked key guesses.
    Attack(AttackArgs),
    /// Train a network on a profiling set.
    Train(TrainArgs),
    /// Compute a rank curve for a trained model on an attack set.
    Rank(RankArgs),
    /// Randomly shift the traces of a set.
    Desync(DesyncArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// JSON file with synthesizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub traces: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `random` or `fixed:<32 hex digits>`.
    #[arg(long)]
    pub key_mode: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Dpa,
    Cpa,
    Template,
}

#[derive(Args)]
pub struct LeakageArgs {
    /// Targeted key byte.
    #[arg(long)]
    pub byte: Option<usize>,
    /// `sbox_out`, `xor_out` or `masked_sbox_out`.
    #[arg(long)]
    pub intermediate: Option<String>,
}

#[derive(Args)]
pub struct AttackArgs {
    pub method: Method,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Profiling set for template attacks.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub leakage: LeakageArgs,
    /// `hamming_weight`, `identity` or `bit_select:<j>`.
    #[arg(long)]
    pub power_model: Option<String>,
    /// Number of points of interest for template attacks.
    #[arg(long)]
    pub poi: Option<usize>,
    /// Ranked guesses as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `scnet`, `scnet_seq`, `cnn` or `ngroup:N[:lstm=J]`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub leakage: LeakageArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// `per_point_standardize` or `none`.
    #[arg(long)]
    pub normalize: Option<String>,
    /// Learning-rate schedule: `constant` or `cosine`.
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Args)]
pub struct RankArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file, or `oracle` for the true-posterior stub.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub experiments: Option<usize>,
    #[arg(long)]
    pub max_traces: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub leakage: LeakageArgs,
    /// True key byte; read from the set's metadata when omitted.
    #[arg(long)]
    pub key: Option<u8>,
    /// Rank curve CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DesyncArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub max_offset: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Size the worker pool from `SCAKIT_THREADS` (unset or 0: one per core).
fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("SCAKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::invalid(format!("SCAKIT_THREADS must be a nonnegative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<u8, CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Attack(a) => commands::attack(a),
        Command::Train(a) => commands::train(a),
        Command::Rank(a) => commands::rank(a),
        Command::Desync(a) => commands::desync(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::INVALID } else { code::OK });
        }
    };
    match run(cli) {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
