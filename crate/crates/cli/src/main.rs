//! `netquant` command-line pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netquant::pipeline::exit_code;

#[derive(Parser, Debug)]
#[command(name = "netquant", version, about = "Quantize and entropy-code network parameters")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize and encode a model directory.
    Quantize(QuantizeArgs),
    /// Run the pipeline over a grid of points and write a CSV.
    Sweep(SweepArgs),
    /// Summarize an encoded model.
    Report(ReportArgs),
    /// Train the reference network on the synthetic task.
    TrainRef(TrainArgs),
    /// Magnitude-prune a model directory.
    Prune(PruneArgs),
    /// Compute and store a curvature vector.
    Curvature(CurvatureArgs),
}

/// Pipeline settings. Precedence: defaults, then `--config`, then the
/// named flags, then `--set`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// kmeans, hw-kmeans, uniform or ecsq.
    #[arg(long)]
    pub quantizer: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub target_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// exact, gauss-newton, adam or identity.
    #[arg(long)]
    pub curvature: Option<String>,
    /// fixed or huffman.
    #[arg(long)]
    pub coding: Option<String>,
    #[arg(long)]
    pub prune_fraction: Option<f64>,
    #[arg(long)]
    pub fine_tune: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hessian_samples: Option<usize>,
}

/// Dataset overrides; by default `train.csv` and `eval.csv` are read from
/// the model directory when present.
#[derive(Args, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Split for curvature; defaults to the training split.
    #[arg(long)]
    pub hessian: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory receiving model.nq, report.json and config.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated quantizers.
    #[arg(long)]
    pub quantizers: Option<String>,
    /// Comma-separated coding schemes.
    #[arg(long)]
    pub codings: Option<String>,
    #[arg(long)]
    pub k_list: Option<String>,
    /// Lagrange multipliers for ecsq.
    #[arg(long)]
    pub lambda_list: Option<String>,
    /// Target compression ratios for ecsq.
    #[arg(long)]
    pub ratio_list: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Encoded model file.
    #[arg(long)]
    pub input: PathBuf,
    /// Model directory providing the network for accuracy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 24)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.9)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub task_seed: u64,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "256")]
    pub hidden: String,
    /// relu, tanh or none.
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value_t = 4000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CurvatureArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// exact, gauss-newton, adam or identity.
    #[arg(long, default_value = "exact")]
    pub source: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub hessian_samples: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_epsilon: f64,
    #[command(flatten)]
    pub data: DataArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Quantize(a) => commands::quantize(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
        Command::TrainRef(a) => commands::train_ref(a),
        Command::Prune(a) => commands::prune(a),
        Command::Curvature(a) => commands::curvature(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
