//! The `l2caf` command line: training, visualization, localization
//! evaluation, timing and sanity checks.
//!
//! Exit codes: 0 success, 2 usage error, 3 incompatible model and method,
//! 4 I/O or model-file error, 1 anything else.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Maps a library error onto the stable exit code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Incompatible(_) => EXIT_INCOMPATIBLE,
        Error::Io { .. } | Error::ModelFile(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "l2caf", version, about = "Attention filters, Grad-CAM baselines and localization on toy networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a preset network on generated shapes.
    Train(TrainArgs),
    /// Write heatmaps, overlays and estimated boxes.
    Visualize(VisualizeArgs),
    /// Weakly supervised localization metrics per method.
    EvalWsol(EvalArgs),
    /// Time vanilla L2-CAF, fast L2-CAF and Grad-CAM per image.
    Bench(BenchArgs),
    /// Heatmap rank correlation against randomized models.
    Sanity(SanityArgs),
    /// Write a generated dataset as PPM images plus a manifest.
    Data(DataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainKind {
    Cls,
    RetTriplet,
    RetNpair,
    Rnn,
}

/// Synthetic dataset flags shared by every subcommand that generates data.
#[derive(Clone, Debug, Args)]
pub struct DataFlags {
    /// Number of images (or sequences).
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    pub n_images: u64,
    /// Seed of the generated data.
    #[arg(long, default_value_t = 2)]
    pub data_seed: u64,
    /// Number of shape classes, 2 to 5.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..=5))]
    pub classes: u64,
    /// Background noise amplitude in [0, 1].
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

/// Filter optimization flags.
#[derive(Clone, Debug, Args)]
pub struct CafFlags {
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Look-back distance of the stopping rule.
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    /// Seed of the random filter initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threshold as a fraction of the heatmap maximum.
    #[arg(long, default_value_t = 0.2)]
    pub theta: f64,
    /// Filter layer index; defaults to the last convolutional feature map.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub kind: TrainKind,
    #[arg(long, short)]
    pub out: PathBuf,
    /// CSV loss log; defaults to the model path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Training set size (sequences for `rnn`).
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..=100_000))]
    pub n_train: u64,
    /// Seed of the generated training data.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..=5))]
    pub classes: u64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Input PPM images; generated images are used when none are given.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "l2caf")]
    pub method: Vec<String>,
    /// Class explained by class-specific methods; defaults to the prediction.
    #[arg(long)]
    pub class: Option<usize>,
    /// Frames per generated sequence, for recurrent models.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub caf: CafFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "l2caf-fast,grad-cam,grad-cam-abs")]
    pub methods: Vec<String>,
    /// Top-k rule for classification models (1 or 5).
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub caf: CafFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model file; alternatively use `--preset` for an untrained preset.
    #[arg(long, short, conflicts_with = "preset", required_unless_present = "preset")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed of the preset's initial weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub caf: CafFlags,
}

#[derive(Debug, Args)]
pub struct SanityArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "none,logits,all-layers")]
    pub scopes: Vec<String>,
    /// Randomization trials per scope.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..=1000))]
    pub trials: u64,
    /// Root seed of the randomizations.
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub caf: CafFlags,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
}

/// Parses `args` (including the program name) and runs the command.
/// Messages go to stdout and stderr; the return value is the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Caps the worker pool at `L2CAF_THREADS` when set. Only the first call in a
/// process takes effect.
fn configure_threads() {
    if let Some(n) = std::env::var("L2CAF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
