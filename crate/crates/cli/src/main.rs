//! `uagan` command-line harness.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uagan::UaganError;

#[derive(Parser, Debug)]
#[command(
    name = "uagan",
    version,
    about = "Unpaired multimodal translation + segmentation: data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every verb.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file, or a run manifest (.json) to re-execute.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record and enforce a fully reproducible run.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output location: dataset directory for gen-data, run name or path otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an unpaired phantom dataset (train/ and test/ splits).
    GenData(GenDataArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a trained run on a test split.
    Eval(EvalArgs),
    /// Translate test slices to a target modality and write images.
    Translate(TranslateArgs),
    /// Write channel-summed feature heatmaps for test slices.
    Heatmap(HeatmapArgs),
    /// Train and evaluate several variants over several seeds and tabulate.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Patients in the training split.
    #[arg(long, alias = "patients")]
    pub train_patients: Option<usize>,
    #[arg(long)]
    pub test_patients: Option<usize>,
    #[arg(long)]
    pub modalities: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
}

/// Training overrides shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Disable on-the-fly augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Continue from the run's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory or name (defaults to --out).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Score the annotations against themselves instead of a model.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub run: PathBuf,
    /// Target modality name (e.g. B).
    #[arg(long)]
    pub target: String,
    /// Maximum number of slices to translate.
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
    /// Encoder level whose features are visualized.
    #[arg(long, default_value_t = 0)]
    pub level: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Comma-separated presets; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

fn exit_code(e: &UaganError) -> u8 {
    match e {
        UaganError::Config(_) | UaganError::Argument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
