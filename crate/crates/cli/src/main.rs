//! `pqd`: train a baseline, run stage orders over it, benchmark checkpoints
//! and aggregate the results.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pqd_core::pipeline::DEFAULT_ORDER;

#[derive(Debug, Parser)]
#[command(
    name = "pqd",
    version,
    about = "Ordered prune / INT8 QAT / distillation compression runs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense FP32 baseline that later stages start from and
    /// distill against.
    TrainBaseline(TrainBaselineArgs),
    /// Run one stage order over a baseline.
    Pipeline(PipelineArgs),
    /// Run every order of a set over several seeds and compare them.
    Ablate(AblateArgs),
    /// Time a checkpoint and write its table row.
    Bench(BenchArgs),
    /// Merge the metrics.csv files under a directory into one table.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchChoice {
    Mlp,
    Smallconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderSet {
    Default4,
    All6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Latency harness flags shared by every command that times a model.
#[derive(Debug, Clone, Args)]
pub struct BenchFlags {
    /// Worker threads for timed inference.
    #[arg(long, env = "PQD_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 10)]
    pub warmups: usize,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    /// Test images in the timed batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

/// Optimizer flags of the fine-tuning stages.
#[derive(Debug, Clone, Args)]
pub struct StageFlags {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainBaselineArgs {
    /// `synth`, `synth:SEED` or `cifar:DIR`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    #[arg(long, value_enum, default_value_t = ArchChoice::Smallconv)]
    pub arch: ArchChoice,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[command(flatten)]
    pub bench: BenchFlags,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Baseline checkpoint, or the directory holding `ckpt.pqdk`.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, default_value = DEFAULT_ORDER)]
    pub order: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the data recorded in the baseline's manifest.
    #[arg(long)]
    pub data: Option<String>,
    /// Flag the run when the final model is slower than this.
    #[arg(long)]
    pub latency_budget_ms: Option<f64>,
    #[command(flatten)]
    pub stage: StageFlags,
    #[command(flatten)]
    pub bench: BenchFlags,
    /// Runs root; the run lands in `<out>/<order>/<seed>/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, value_enum, default_value_t = OrderSet::Default4)]
    pub orders: OrderSet,
    /// Seeds 0..N are run for every order.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Prune, QAT and KD epochs.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "20,40,40")]
    pub budgets: Vec<usize>,
    #[arg(long)]
    pub data: Option<String>,
    #[command(flatten)]
    pub stage: StageFlags,
    #[command(flatten)]
    pub bench: BenchFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Checkpoint that compression and speedup are relative to; the
    /// benchmarked checkpoint itself by default.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Defaults to the data recorded in the checkpoint's manifest.
    #[arg(long)]
    pub data: Option<String>,
    #[command(flatten)]
    pub bench: BenchFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Keep only rows not dominated on accuracy, size and latency.
    #[arg(long)]
    pub pareto: bool,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Replaces the recorded output location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
