mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::{CliResult, Failure};

#[derive(Parser)]
#[command(name = "slimkit", version, about = "Training-free activation-guided compression of transformer blocks")]
struct Cli {
    /// Worker threads. SLIMKIT_THREADS overrides this when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a calibration coreset from an embedding bundle.
    Slimset(SlimsetArgs),
    /// Accumulate activation correlations into a statistics bundle.
    Calibrate(CalibrateArgs),
    /// Allocate per-group ranks under a parameter budget.
    Allocate(AllocateArgs),
    /// Compress a model under a budget or a plan and write a checkpoint.
    Compress(CompressArgs),
    /// Print a compression report.
    Report(ReportArgs),
    /// Run the seeded closed-form checks.
    Verify(VerifyArgs),
    /// Generate a toy model and its embedding, activation and probe bundles.
    Toy(ToyArgs),
}

#[derive(Args)]
pub struct SlimsetArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    /// Cosine similarity above which a later pick is dropped.
    #[arg(long, default_value_t = 0.95)]
    pub dedup: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub median_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub median_max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub activations: PathBuf,
    /// Keep only activations of prompts in this coreset file.
    #[arg(long)]
    pub coreset: Option<PathBuf>,
    #[arg(long, default_value_t = slimkit::calib::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// uniform, trq, or softmax:<temperature>.
    #[arg(long, default_value = "trq")]
    pub weighting: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AllocationArgs {
    /// Softmax temperature; defaults to 0.05 times the score spread.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = slimkit::alloc::DEFAULT_R_MIN)]
    pub r_min: usize,
    #[arg(long, default_value_t = slimkit::alloc::DEFAULT_MULTIPLE)]
    pub multiple: usize,
}

#[derive(Args)]
pub struct AllocateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Parameter budget: an absolute count, or a fraction of the model with an `x` suffix (`0.73x`).
    #[arg(long)]
    pub budget: String,
    #[command(flatten)]
    pub alloc: AllocationArgs,
    /// Plan file (group id → rank).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the allocation table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
    pub budget: Option<String>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub alloc: AllocationArgs,
    /// Held-out activation bundle for measured per-group losses.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Probe bundle for end-to-end output deviation.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Output directory: checkpoint/, plan.json, report.json, report.txt, metrics.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// A report.json written by `compress`.
    pub report: PathBuf,
    /// Print the flat metrics instead of the table.
    #[arg(long)]
    pub metrics: bool,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Instances per suite.
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    /// Whiten against a wrong correlation; the equality suites must fail.
    #[arg(long)]
    pub break_whitening: bool,
}

#[derive(Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn_inner: usize,
    /// Calibration prompts.
    #[arg(long, default_value_t = 48)]
    pub prompts: usize,
    /// Held-out prompts for eval activations and probes.
    #[arg(long, default_value_t = 8)]
    pub eval_prompts: usize,
    #[arg(long, default_value_t = 32)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub text_tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub timesteps: u32,
    #[arg(long)]
    pub out: PathBuf,
}

fn threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var("SLIMKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Failure::config(format!("SLIMKIT_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => match flag {
            Some(0) => Err(Failure::config("--threads must be positive")),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot start {n} worker threads: {e}")))?;
    }
    match cli.command {
        Command::Slimset(a) => commands::slimset(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Allocate(a) => commands::allocate(&a),
        Command::Compress(a) => commands::compress(&a),
        Command::Report(a) => commands::report(&a),
        Command::Verify(a) => commands::verify(&a, cli.seed),
        Command::Toy(a) => commands::toy(&a, cli.seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
