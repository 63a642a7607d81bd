//! `genclass` command-line tool.
//!
//! Every subcommand writes a frozen copy of its resolved configuration next
//! to its outputs and prints a one-line JSON summary on stdout. Failures exit
//! non-zero with `{"error": {"kind", "message"}}` on stderr. Checkpoints are
//! cached under `$GENCLASS_CACHE` (default `.genclass-cache`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genclass::classifier::{ClassifierConfig, WeightingStrategy};
use genclass::Execution;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "genclass", version, about = "Generative classification with class-conditional diffusion models")]
struct Cli {
    /// Seed for all randomness in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run data-parallel work sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural toy dataset.
    GenToy(GenToyArgs),
    /// Train a class-conditional denoiser on a manifest.
    Train(TrainArgs),
    /// Classify images with a trained checkpoint.
    Classify(ClassifyArgs),
    /// Classify a manifest split and write metrics plus per-item scores.
    Evaluate(EvaluateArgs),
    /// Held-out-class anomaly detection experiment.
    Anomaly(AnomalyArgs),
    /// Low-data efficiency sweep over training-set sizes and seeds.
    Efficiency(EfficiencyArgs),
    /// Run an experiment spec file.
    Experiment(ExperimentArgs),
    /// Counterfactual heatmaps for one image.
    Heatmap(HeatmapArgs),
    /// Draw class-conditional samples.
    Sample(SampleArgs),
    /// Fit a psychometric function to binned confidence/accuracy data.
    FitPsychometric(FitPsychometricArgs),
    /// Real-vs-synthetic judgment statistics.
    TuringReport(TuringReportArgs),
    /// Run the annotation study HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for genclass::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct ClassifierArgs {
    /// custom_polynomial, uniform, snr, ranking, normalized_per_draw or exp_decay.
    #[arg(long, default_value = "custom_polynomial")]
    weighting: String,
    #[arg(long, default_value_t = 20)]
    min_iters: usize,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, default_value_t = 2e-3)]
    p_value: f64,
    /// Central error mask radius in latent pixels.
    #[arg(long)]
    mask_radius: Option<f64>,
    /// Always run max-iters draws.
    #[arg(long)]
    no_pruning: bool,
    #[arg(long, default_value_t = 16)]
    draw_batch: usize,
    /// Per-draw augmentation: none, geometric or default.
    #[arg(long, default_value = "none")]
    inference_augment: String,
}

impl ClassifierArgs {
    fn config(&self, seed: u64) -> genclass::Result<ClassifierConfig> {
        let mut cfg = ClassifierConfig {
            min_iters: self.min_iters,
            max_iters: self.max_iters,
            p_value: self.p_value,
            weighting: WeightingStrategy::from_name(&self.weighting)?,
            mask_radius: self.mask_radius,
            seed,
            pruning: !self.no_pruning,
            draw_batch: self.draw_batch,
            inference_augment: None,
        };
        cfg.set("inference_augment", &self.inference_augment)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
struct GenToyArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Images per class.
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Class name or index whose train/val records are left out of the manifest.
    #[arg(long)]
    held_out: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one training key, e.g. `--set steps=3000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint path; defaults to a content-addressed file in the cache.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (JSONL); defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Retrain even when a cached checkpoint exists.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory searched recursively for images.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    classifier: ClassifierArgs,
    /// Output directory for metrics.json and scores.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct AnomalyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    held_out: String,
    /// Loaded if it exists, otherwise trained and written here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    classifier: ClassifierArgs,
    /// Experiment keys such as `train.steps=3000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EfficiencyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated training images per class.
    #[arg(long, value_delimiter = ',', required = true)]
    n_per_class: Vec<usize>,
    /// Comma list, a..b or a..=b.
    #[arg(long, default_value = "0..5")]
    seeds: String,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// Experiment spec file; relative paths resolve against its directory.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Target class name, or `all`.
    #[arg(long, default_value = "all")]
    target: String,
    /// Monte Carlo draws per class.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Pixels above this quantile of |H| are marked in the overlay.
    #[arg(long, default_value_t = 0.9)]
    quantile: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Class name to condition on.
    #[arg(long = "class")]
    class: String,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Reverse steps, strided over the training schedule.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FitPsychometricArgs {
    /// JSONL rows with `confidence` in [0, 1] and boolean `correct`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 25)]
    bins: usize,
    /// Guess rate, 1/K for K classes.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TuringReportArgs {
    /// JSONL judgments: item_id, rater_id, truth_is_real, guessed_real,
    /// intended_class, guessed_class.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    /// Directory holding the study event logs.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory that study image paths are relative to.
    #[arg(long)]
    image_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<genclass::Error>() {
        return e.kind();
    }
    if let Some(e) = e.downcast_ref::<genclass_service::ServiceError>() {
        return e.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "error"
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match commands::run(cli.command, cli.seed, exec) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
