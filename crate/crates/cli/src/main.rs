//! `hoi`: train, evaluate and inspect the interaction detector.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod plots;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hoi", version, about = "Human-object interaction detection")]
pub struct Cli {
    /// Parent directory for run directories.
    #[arg(long, global = true, env = rundir::RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on an annotation file.
    Train(TrainArgs),
    /// Score a prediction file against annotations.
    Eval(EvalArgs),
    /// Run a checkpoint over a folder of PNG images or an annotation file.
    Infer(InferArgs),
    /// Write final-layer cross-attention maps of both task decoders.
    ExportAttn(ExportAttnArgs),
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train every component ablation and tabulate test mAP.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.field=value` overrides, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training annotations (images resolved relative to this file).
    #[arg(long)]
    pub data: PathBuf,
    /// Annotations evaluated every `train.eval_every` epochs.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Initialize matching parameters from a checkpoint and hold them fixed
    /// for `train.warmup_epochs`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Log every optimizer step, not only epochs.
    #[arg(long)]
    pub log_steps: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Training annotations that define rare categories; without it the
    /// evaluated annotations are used.
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long, default_value_t = hoi_core::evaluation::DEFAULT_RARE_THRESHOLD)]
    pub rare_threshold: usize,
    /// Metrics file; defaults to `metrics.json` in a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also draw precision-recall curves to this PNG.
    #[arg(long)]
    pub pr_plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of PNG images (ids follow sorted file names).
    #[arg(long, required_unless_present = "annotations", conflicts_with = "annotations")]
    pub images: Option<PathBuf>,
    /// Annotation file whose images (and ids) are used.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Drop queries whose most likely class is background.
    #[arg(long)]
    pub background_argmax: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Prediction file; defaults to `predictions.json` in a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Queries to render; defaults to the three highest-scoring ones.
    #[arg(long, value_delimiter = ',')]
    pub queries: Vec<usize>,
    /// Output folder; defaults to a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output folder for PNGs and `annotations.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Spec JSON; the flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub n_obj_classes: Option<usize>,
    #[arg(long)]
    pub n_actions: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub skew: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub first_id: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
