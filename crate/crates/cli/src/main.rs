//! `yt8m` — one binary for the whole pipeline: synthesize datasets,
//! train zoo architectures, score checkpoints into submission files,
//! evaluate GAP@k, ensemble, and benchmark the large-file paths.
//!
//! Exit codes: 0 success (including `--help`/`--version`), 1 validation
//! or usage error, 2 I/O error.

mod commands;
mod config;
mod members;

use std::error::Error;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Ctx;
use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "yt8m",
    version,
    about = "Desk-scale lab for video-level multi-label classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct Globals {
    /// Master seed; every stochastic stage derives its stream from it.
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
    /// Compute in f32 instead of f64 (checkpoints stay f64 on disk).
    #[arg(long, global = true)]
    pub float32: bool,
    /// Worker threads for the parallel eval/parse stages.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Suppress progress notes; result lines still print.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Train one architecture and write a checkpoint.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint into a submission file.
    Infer(InferArgs),
    /// GAP@k of a submission file against a labeled dataset.
    Eval(EvalArgs),
    /// Combine models or submission files.
    #[command(subcommand)]
    Ensemble(EnsembleCmd),
    /// Time the large-file paths.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Native,
    Tfrecord,
}

/// Schema for TFRecord inputs, which carry no header. Native files
/// self-describe, so these are ignored for them.
#[derive(Args)]
pub struct SchemaArgs {
    /// Label-vocabulary size of a TFRecord input.
    #[arg(long, value_name = "C")]
    pub classes: Option<u32>,
    /// Visual feature width of a TFRecord input.
    #[arg(long, value_name = "D")]
    pub rgb_dim: Option<usize>,
    /// Audio feature width of a TFRecord input.
    #[arg(long, value_name = "D")]
    pub audio_dim: Option<usize>,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of videos to generate.
    #[arg(long, value_name = "N")]
    pub videos: Option<u64>,
    /// Skip the first N videos of the seeded stream. Windows one teacher
    /// into disjoint train/test splits: same --seed, different windows.
    #[arg(long, value_name = "N")]
    pub skip: Option<u64>,
    /// Label-vocabulary size.
    #[arg(long, value_name = "C")]
    pub classes: Option<u32>,
    /// Visual feature width.
    #[arg(long, value_name = "D")]
    pub rgb_dim: Option<usize>,
    /// Audio feature width.
    #[arg(long, value_name = "D")]
    pub audio_dim: Option<usize>,
    /// Fraction of nonzero teacher weights, in (0, 1].
    #[arg(long, value_name = "F")]
    pub sparsity: Option<f64>,
    /// Standard deviation of feature noise.
    #[arg(long, value_name = "STD")]
    pub noise: Option<f64>,
    /// Output file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// On-disk format.
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Architecture: logreg, moe, moe_c, mlp2000, mlp3000, mlp512_256,
    /// mlp_res5, mlp_a, mlp_e, ae_clf, cnn1.
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
    /// Experts per class (moe family).
    #[arg(long, value_name = "M")]
    pub mixtures: Option<usize>,
    /// Base learning rate; scientific notation accepted (5E-4).
    #[arg(long, value_name = "R")]
    pub lr: Option<f64>,
    /// L1 penalty weight.
    #[arg(long, value_name = "P", conflicts_with = "l2")]
    pub l1: Option<f64>,
    /// L2 penalty weight.
    #[arg(long, value_name = "P")]
    pub l2: Option<f64>,
    /// Dropout keep probability.
    #[arg(long, value_name = "Q")]
    pub keep_prob: Option<f64>,
    /// Mini-batch size.
    #[arg(long, value_name = "B")]
    pub batch: Option<usize>,
    /// Optimizer steps.
    #[arg(long, value_name = "T")]
    pub steps: Option<u64>,
    /// Fold the --val set into the training pool.
    #[arg(long)]
    pub include_validation: bool,
    /// Training dataset (native or TFRecord).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Held-out dataset.
    #[arg(long, value_name = "PATH")]
    pub val: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Measure training GAP every this many steps.
    #[arg(long, value_name = "T")]
    pub eval_every: Option<u64>,
    /// Write the step,loss,gap curve as CSV.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Args)]
pub struct InferArgs {
    /// Trained model to score with.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset to score.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Pairs kept per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Output submission file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Cap confidences at six fractional digits.
    #[arg(long)]
    pub round6: bool,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Submission file to evaluate.
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Labeled dataset with the ground truth.
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    /// Pairs scored per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Subcommand)]
pub enum EnsembleCmd {
    /// Average submission files label-wise.
    AvgFiles(AvgFilesArgs),
    /// Average member model scores.
    AvgModels(AvgModelsArgs),
    /// Train a meta-network on concatenated member scores.
    Stack(StackArgs),
}

#[derive(Args)]
pub struct AvgFilesArgs {
    /// Pairs kept per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Output submission file.
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,
    /// Submission files to average (at least two).
    #[arg(value_name = "FILES", num_args = 2.., required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Args)]
pub struct AvgModelsArgs {
    /// JSON file listing members (checkpoints or architectures).
    #[arg(long, value_name = "PATH")]
    pub members: PathBuf,
    /// Dataset for training fresh members.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Dataset to score (defaults to --data).
    #[arg(long, value_name = "PATH")]
    pub score: Option<PathBuf>,
    /// Output submission file.
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,
    /// Pairs kept per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Learning rate for fresh members.
    #[arg(long, value_name = "R")]
    pub lr: Option<f64>,
    /// Mini-batch size for fresh members.
    #[arg(long, value_name = "B")]
    pub batch: Option<usize>,
    /// Optimizer steps for fresh members.
    #[arg(long, value_name = "T")]
    pub steps: Option<u64>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Args)]
pub struct StackArgs {
    /// JSON file listing members and an optional meta network.
    #[arg(long, value_name = "PATH")]
    pub members: PathBuf,
    /// Dataset the fused stack trains on.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Dataset to score (defaults to --data).
    #[arg(long, value_name = "PATH")]
    pub score: Option<PathBuf>,
    /// Output submission file.
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,
    /// Pairs kept per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Learning rate for the fused stack.
    #[arg(long, value_name = "R")]
    pub lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long, value_name = "B")]
    pub batch: Option<usize>,
    /// Optimizer steps.
    #[arg(long, value_name = "T")]
    pub steps: Option<u64>,
    /// Train only the meta-network; member parameters stay fixed.
    #[arg(long)]
    pub freeze_members: bool,
    /// Save the trained stack as a checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Eval,
    AvgFiles,
}

#[derive(Args)]
pub struct BenchArgs {
    /// What to measure.
    #[arg(long, value_enum, default_value_t = BenchOp::Eval)]
    pub op: BenchOp,
    /// Submission rows per generated file.
    #[arg(long, value_name = "N")]
    pub rows: Option<usize>,
    /// Pairs per video.
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Files to average (avg-files op).
    #[arg(long, value_name = "N")]
    pub files: Option<usize>,
    /// Append the result row to a CSV report.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 for usage errors by default; this tool
            // reserves 2 for I/O, so usage maps to 1 and help/version
            // (which clap routes to stdout) to 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(cause) = src {
                eprintln!("  caused by: {cause}");
                src = cause.source();
            }
            exit_code_for(e.as_ref())
        }
    }
}

/// 2 if any error in the chain is I/O, else 1.
fn exit_code_for(e: &(dyn Error + 'static)) -> i32 {
    let mut cur = Some(e);
    while let Some(c) = cur {
        if c.is::<std::io::Error>() {
            return 2;
        }
        cur = c.source();
    }
    1
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn Error>> {
    let file = match &cli.globals.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.globals.seed.or(file.seed).unwrap_or(0),
        float32: cli.globals.float32 || file.float32.unwrap_or(false),
        quiet: cli.globals.quiet || file.quiet.unwrap_or(false),
    };
    if let Some(n) = cli.globals.threads.or(file.threads) {
        if n == 0 {
            return Err("--threads must be ≥ 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &file, &ctx),
        Command::Train(a) => {
            if ctx.float32 {
                commands::train_cmd::<f32>(a, &file, &ctx)
            } else {
                commands::train_cmd::<f64>(a, &file, &ctx)
            }
        }
        Command::Infer(a) => {
            if ctx.float32 {
                commands::infer_cmd::<f32>(a, &file, &ctx)
            } else {
                commands::infer_cmd::<f64>(a, &file, &ctx)
            }
        }
        Command::Eval(a) => commands::eval_cmd(a, &file, &ctx),
        Command::Ensemble(EnsembleCmd::AvgFiles(a)) => commands::avg_files_cmd(a, &file, &ctx),
        Command::Ensemble(EnsembleCmd::AvgModels(a)) => {
            if ctx.float32 {
                commands::avg_models_cmd::<f32>(a, &file, &ctx)
            } else {
                commands::avg_models_cmd::<f64>(a, &file, &ctx)
            }
        }
        Command::Ensemble(EnsembleCmd::Stack(a)) => {
            if ctx.float32 {
                commands::stack_cmd::<f32>(a, &file, &ctx)
            } else {
                commands::stack_cmd::<f64>(a, &file, &ctx)
            }
        }
        Command::Bench(a) => commands::bench_cmd(a, &file, &ctx),
    }
}
