//! `manifold-kin`: dataset generation, prior training and benchmarking,
//! simulated tracking episodes and plots.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use manifold_kin::kmp::Variant;
use manifold_kin::sim::{Shape, TrackerKind};

pub const THREADS_ENV: &str = "MANIFOLD_KIN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "manifold-kin", version, about = "Kinematic prior and world-frame tracking toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Chain description file.
    #[arg(long, global = true)]
    pub chain: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, solve and curate a training dataset.
    GenDataset(GenDatasetArgs),
    /// Train a prior on a dataset.
    TrainKmp(TrainArgs),
    /// Time the prior against the iterative solver.
    BenchKmp(BenchArgs),
    /// Run one tracking episode, or a closed/open-loop comparison.
    Run(RunArgs),
    /// Success table over shapes and seeds plus the mobility table.
    Eval(EvalArgs),
    /// Render an episode or training log CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// Records to keep.
    #[arg(long, value_parser = positive)]
    pub count: Option<usize>,
    /// Keep every solved sample and subsample uniformly.
    #[arg(long)]
    pub uniform: bool,
    /// Largest accepted IK position error (m).
    #[arg(long)]
    pub prune: Option<f64>,
    /// Dataset file; `<out>/dataset.kmpd` by default.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = positive)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub width: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Model file; `<out>/model.kmpm` by default.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "1,16,256,4000")]
    pub batches: Vec<usize>,
    /// Functional-region test commands.
    #[arg(long, value_parser = positive, default_value_t = 2000)]
    pub samples: usize,
    /// Iteration cap of the reference solver.
    #[arg(long, value_parser = positive, default_value_t = 5)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct TrackerArgs {
    #[arg(long, default_value = "exact-ik")]
    pub tracker: TrackerKind,
    /// Prior used by the `kmp` tracker.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Per-step drift standard deviation (m).
    #[arg(long)]
    pub drift: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "circle")]
    pub shape: Shape,
    /// Paired closed-loop versus open-loop comparison.
    #[arg(long)]
    pub ab: bool,
    /// Seeds of the comparison.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=20), default_value_t = 10)]
    pub seeds: u64,
    /// Episode index under the root seed.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Commander sees only dead reckoning.
    #[arg(long)]
    pub open_loop: bool,
    #[command(flatten)]
    pub tracker: TrackerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_delimiter = ',', default_value = "star,heart,circle,spiral,rectangle")]
    pub shapes: Vec<Shape>,
    #[arg(long, value_parser = positive, default_value_t = 10)]
    pub seeds: usize,
    /// Skip the mobility table.
    #[arg(long)]
    pub no_mobility: bool,
    #[command(flatten)]
    pub tracker: TrackerArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Episode CSV from `run` or training log CSV from `train-kmp`.
    #[arg(long)]
    pub input: PathBuf,
    /// SVG file; the input path with an `.svg` extension by default.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

/// Bad arguments detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| commands::dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
