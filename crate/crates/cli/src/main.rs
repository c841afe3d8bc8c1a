//! `apgn`: data generation, training, evaluation, prediction, benchmarking
//! and gradient checking from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures (divergence, gradient check over tolerance).

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use apgn_core::model::Ablations;
use clap::{Args, Parser, Subcommand};

pub use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "apgn", version, about = "Adaptive proposal generation for temporal sentence grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, val and test splits of the synthetic task.
    Datagen(DatagenArgs),
    /// Train a model and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Recall table and proposal counts for a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Ranked segments for one feature file and query.
    Predict(PredictArgs),
    /// Inference throughput in videos per second.
    Benchmark(BenchmarkArgs),
    /// Finite-difference check of every loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for features and manifests.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `synthetic.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Ablation switches; each one turns the matching config flag on.
#[derive(Args, Debug, Default, Clone)]
pub struct AblationFlags {
    #[arg(long)]
    pub no_classification: bool,
    #[arg(long)]
    pub no_adaptive_proposals: bool,
    #[arg(long)]
    pub no_position: bool,
    #[arg(long)]
    pub no_graph: bool,
    #[arg(long)]
    pub mean_pool: bool,
    #[arg(long)]
    pub edge_attention: bool,
    #[arg(long)]
    pub unbalanced_loss: bool,
}

impl AblationFlags {
    pub fn apply(&self, a: &mut Ablations) {
        a.no_classification |= self.no_classification;
        a.no_adaptive_proposals |= self.no_adaptive_proposals;
        a.no_position |= self.no_position;
        a.no_graph |= self.no_graph;
        a.mean_pool |= self.mean_pool;
        a.edge_attention |= self.edge_attention;
        a.unbalanced_loss |= self.unbalanced_loss;
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `datagen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the run seed (initialisation and shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint; epochs keep their numbering.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest file, or a data directory (its test manifest is used).
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration; only its `[eval]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report file; the report is always printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rank raw top-n without suppression.
    #[arg(long)]
    pub no_nms: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw little-endian f32 features, frames x feature_dim.
    #[arg(long)]
    pub features: PathBuf,
    /// Comma-separated query token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tokens: Vec<u32>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_nms: bool,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = commands::init_threads().and_then(|()| match cli.command {
        Command::Datagen(a) => commands::datagen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
