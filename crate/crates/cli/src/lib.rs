//! Experiment runner: dataset generation, pretraining, fine-tuning runs with
//! persistent run directories, and reports built from those directories.

pub mod commands;
pub mod config;
pub mod rundir;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{ConfigError, Method, RunConfig, LAYOUT_VERSION, OUTPUT_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EXPERIMENT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mcft", version, about = "Momentum-consistency fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Masked-reconstruction pretraining; writes a checkpoint.
    Pretrain(PretrainArgs),
    /// Few-shot fine-tuning runs.
    Finetune(FinetuneArgs),
    /// Accuracy of a saved model on the test partition.
    Eval(EvalArgs),
    /// Layer-wise similarity of fine-tuned encoders to their checkpoint.
    Similarity(SimilarityArgs),
    /// Parameter, FLOP and throughput table.
    Bench(BenchArgs),
    /// Aggregate accuracy tables from run directories.
    Report(ReportArgs),
    /// Print a model's configuration, mask and costs as JSON.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Restrict each split to this many classes.
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub prune_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Reference checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `name=path` of a fine-tuned model; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Number of test clouds used as probes.
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// `cls` or `token-mean`.
    #[arg(long, default_value = "cls")]
    pub mode: String,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// `name=path` of a model; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directories written by `finetune`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
}

/// Exit code and error kind for a failed command.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return (EXIT_CONFIG, "config");
        }
        if let Some(e) = cause.downcast_ref::<mcft::Error>() {
            let code = if e.is_config() { EXIT_CONFIG } else { EXIT_EXPERIMENT };
            return (code, e.kind());
        }
    }
    (EXIT_EXPERIMENT, "experiment")
}

/// Writes the single-line machine-readable record followed by human text.
fn report_error(kind: &str, code: i32, message: &str, human: &str) {
    let record = json!({ "event": "error", "kind": kind, "exit_code": code, "message": message });
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{record}");
    let _ = write!(err, "{human}");
    if !human.ends_with('\n') {
        let _ = writeln!(err);
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let message = e.kind().to_string();
            report_error("usage", EXIT_CONFIG, &message, &e.render().to_string());
            return EXIT_CONFIG;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            let (code, kind) = classify(&err);
            let message = format!("{err:#}").replace('\n', " ");
            report_error(kind, code, &message, &format!("error: {err:#}"));
            code
        }
    }
}
