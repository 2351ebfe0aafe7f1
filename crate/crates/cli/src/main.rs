//! `cir`: composed image retrieval on precomputed embeddings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data validation error,
//! 3 numerical failure (divergence, non-finite gradients).

mod bundle;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cir_core::combiner::CombineMode;
use cir_core::preprocess::Interpolation;
use cir_core::retrieval::Protocol;
use cir_core::store::{AnnotationSchema, Mixing};
use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

/// Bad invocation: missing inputs, invalid flag values or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "cir",
    version,
    about = "Composed image retrieval on precomputed embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate annotations against embedding files and write a bundle.
    Ingest(IngestArgs),
    /// Train a Combiner on a bundle's train split, early-stopping on val.
    TrainCombiner(TrainArgs),
    /// Evaluate a checkpoint (or the parameter-free sum) on the val split.
    Eval(EvalArgs),
    /// Rank the gallery for one (reference image, caption) query.
    Retrieve(RetrieveArgs),
    /// Pairwise-similarity and target/non-target gap studies.
    AnalyzePairs(AnalyzeArgs),
    /// Aspect-ratio histogram and retained-area statistics for image sizes.
    PreprocessStats(PreprocessArgs),
    /// Generate a synthetic bundle.
    Synth(SynthArgs),
}

fn parse_via<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Args)]
struct ConfigFlags {
    /// TOML or JSON file with configuration keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// full | sum | convex-only | residual-only | static-skip
    #[arg(long, value_parser = parse_via::<CombineMode>)]
    mode: Option<CombineMode>,
    /// generic | fashioniq | cirr
    #[arg(long, value_parser = parse_via::<Protocol>)]
    protocol: Option<Protocol>,
    /// Drop the query's reference image from its ranking (default: on for cirr only).
    #[arg(long)]
    exclude_reference: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn apply(&self, o: &mut Overrides) {
        o.set("mode", self.mode)
            .set("protocol", self.protocol)
            .set("exclude_reference", self.exclude_reference)
            .set("seed", self.seed);
    }
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, o: &mut Overrides) {
        o.set("learning_rate", self.learning_rate)
            .set("weight_decay", self.weight_decay)
            .set("tau", self.tau)
            .set("batch_size", self.batch_size)
            .set("max_epochs", self.max_epochs)
            .set("patience", self.patience)
            .set("dropout_rate", self.dropout_rate)
            .set("adam_beta1", self.adam_beta1)
            .set("adam_beta2", self.adam_beta2)
            .set("adam_eps", self.adam_eps);
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// generic | fashioniq | cirr
    #[arg(long, value_parser = parse_via::<AnnotationSchema>)]
    schema: AnnotationSchema,
    /// Training annotation files (repeatable; e.g. one per FashionIQ category).
    #[arg(long = "train")]
    train: Vec<PathBuf>,
    /// Validation annotation files (repeatable).
    #[arg(long = "val", required = true)]
    val: Vec<PathBuf>,
    /// Image embedding files; ids found in several files resolve to the first.
    #[arg(long = "images", required = true)]
    images: Vec<PathBuf>,
    /// Validation search space; defaults to all image embeddings.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Caption embeddings keyed by query id.
    #[arg(long)]
    captions: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// JSONL epoch log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Record wall-clock seconds per epoch in the log (makes it non-reproducible).
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Trained parameters; optional for `--mode sum`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    /// Bundle supplying images, gallery and captions unless given explicitly.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_via::<CombineMode>)]
    mode: Option<CombineMode>,
    #[arg(long)]
    reference_id: String,
    #[arg(long)]
    caption_id: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Drop the reference image itself from the ranking.
    #[arg(long)]
    exclude_reference: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Trained parameters; without one the sum combination is analysed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for CSV histograms and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sample_pairs: Option<usize>,
    #[arg(long)]
    nontargets_per_query: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// CSV with header `id,width,height`.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target_ratio: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_parser = parse_interpolation)]
    interpolation: Option<Interpolation>,
    #[arg(long, default_value_t = 0.5)]
    bin_width: f64,
}

fn parse_interpolation(s: &str) -> Result<Interpolation, String> {
    match s {
        "nearest" => Ok(Interpolation::Nearest),
        "bilinear" => Ok(Interpolation::Bilinear),
        other => Err(format!("unknown interpolation {other:?}")),
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    /// Validation distractors; defaults to `n-val`.
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// additive | linear-maps
    #[arg(long, default_value = "linear-maps", value_parser = parse_via::<Mixing>)]
    mixing: Mixing,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f32,
}

/// Maps an error chain onto the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cir_core::Error>() {
            return match e {
                e if e.is_numerical() => 3,
                cir_core::Error::InvalidConfig(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::TrainCombiner(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::AnalyzePairs(a) => commands::analyze(a),
        Command::PreprocessStats(a) => commands::preprocess_stats(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
