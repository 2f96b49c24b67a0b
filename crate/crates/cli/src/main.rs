mod commands;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use hyperfraud::ErrorKind;
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-view temporal hypergraph fraud detection.
#[derive(Debug, Parser)]
#[command(name = "hyperfraud", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a transaction CSV; write the encoded table and a report.
    Ingest(IngestArgs),
    /// Build the per-view hypergraphs and dump their hyperedges.
    Build(PipelineArgs),
    /// Compute the enhanced feature matrix with cross-view discrepancy columns.
    Featurize(PipelineArgs),
    /// Train a model; write checkpoints, history and a run manifest.
    Train(PipelineArgs),
    /// Score a trained run on one split and write metrics and curves.
    Eval(EvalArgs),
    /// Write per-node fraud probabilities from a trained run.
    Predict(PredictArgs),
    /// Generate a synthetic dataset with its schema.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Transaction CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Schema JSON naming the timestamp, label, feature and view columns.
    #[arg(long)]
    pub schema: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Train,val,test ratios.
    #[arg(long, default_value = "0.6,0.1,0.3")]
    pub split: String,
}

/// Every training setting. Explicit flags override `--config`, which
/// overrides the built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// JSON file with any subset of the training settings [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Number of views, taken in schema order.
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Sliding window size.
    #[arg(long, default_value_t = 4)]
    pub w: usize,
    /// Novelty sensitivity.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train,val,test ratios.
    #[arg(long, default_value = "0.6,0.1,0.3")]
    pub split: String,
    /// Drop the cross-view discrepancy columns [default: off]
    #[arg(long)]
    pub no_hcdp: bool,
    /// Weight senders uniformly instead of by novelty [default: off]
    #[arg(long)]
    pub no_cnhl: bool,
    /// Average views instead of attention fusion [default: off]
    #[arg(long)]
    pub no_mhf: bool,
    /// Drop categories smaller than the window instead of keeping them as one hyperedge [default: off]
    #[arg(long)]
    pub strict_window: bool,
    /// Use KL(p‖M) in the feature divergence instead of KL(M‖p) [default: off]
    #[arg(long)]
    pub js_standard: bool,
    /// Share one projection per layer across views [default: off]
    #[arg(long)]
    pub share_weights: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitSet {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Best,
    Last,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub on: SplitSet,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: Which,
    /// Report macro-F1 at the best threshold instead of 0.5 (non-default protocol) [default: off]
    #[arg(long)]
    pub sweep_threshold: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: Which,
    /// Also write fused node embeddings [default: off]
    #[arg(long)]
    pub embeddings: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem of the generated files.
    #[arg(long, default_value = "transactions")]
    pub name: String,
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 50)]
    pub categories: usize,
    #[arg(long, default_value_t = 1.2)]
    pub tail_exponent: f64,
    #[arg(long, default_value_t = 0.1)]
    pub fraud_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub camouflage: f64,
    #[arg(long, default_value_t = 0.0)]
    pub inconsistency: f64,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1.5)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.05)]
    pub legit_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub unlabeled_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hyperfraud::Error>().map(|e| e.kind()) {
        Some(ErrorKind::Usage) => 2,
        Some(ErrorKind::Data) | None => 3,
        Some(ErrorKind::Numeric) => 4,
        Some(ErrorKind::Metric) => 5,
    }
}

/// Matches of the chosen subcommand, for telling explicit flags from defaults.
fn sub_matches(m: &ArgMatches) -> &ArgMatches {
    m.subcommand().map(|(_, s)| s).unwrap_or(m)
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let name = matches.subcommand_name().unwrap_or("hyperfraud").to_string();
    match commands::run(cli.command, sub_matches(&matches)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{name}]: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
