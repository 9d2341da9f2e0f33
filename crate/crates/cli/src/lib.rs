//! Library side of the `attrdet` binary: argument definitions, the run
//! configuration file, run manifests and one function per subcommand.
//!
//! Exit codes: 0 on success, 1 when a command fails at runtime, 2 for usage
//! errors (bad flags, unreadable or invalid config).

use std::path::PathBuf;

use attrdet::model::ModelVariant;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;
pub mod render;

pub use config::{DataConfig, Overrides, RunConfig};
pub use manifest::{fingerprint, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] attrdet::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(attrdet::Error::UnknownVariant { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "attrdet", version, about = "Object detection with color and material attributes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or saved detections) on a dataset.
    Eval(EvalArgs),
    /// Run the two-run attribute-transfer protocol.
    Transfer(TrainArgs),
    /// Draw detections above a confidence threshold.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `synth.seed`.
    #[arg(long, env = "RUN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory (default `runs/<variant>-seed<seed>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    /// Overrides `train.seed`.
    #[arg(long, env = "RUN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training-set manifest; overrides `data.train`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file. `train` strips target-category attributes; `transfer`
    /// uses it as the first run's split and mirrors it for the second.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

impl TrainArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            variant: self.variant,
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            manifest: self.manifest.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint to run over the dataset.
    #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed detections (JSON list per image, manifest order).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Dataset manifest to evaluate on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Optional config; only its `[eval]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default `eval/` next to the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adds reference and target rows.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Score threshold for attribute recall.
    #[arg(long)]
    pub confidence: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub confidence: f64,
    /// Colors reference-category boxes blue and target-category boxes red.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a).map(|_| ()),
        Command::Train(a) => commands::train(a).map(|_| ()),
        Command::Eval(a) => commands::eval(a).map(|_| ()),
        Command::Transfer(a) => commands::transfer(a).map(|_| ()),
        Command::Visualize(a) => commands::visualize(a).map(|_| ()),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Help and version output exit with 0.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
