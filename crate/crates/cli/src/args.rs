use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use xlsr::MetricMode;

#[derive(Debug, Clone, Parser)]
#[command(name = "xlsr", version, about = "Train, quantize and evaluate XLSR super-resolution models")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CommonArgs {
    /// Dataset root containing `hr/*.png` and optionally `lr/*.png`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// 32 training images, 4 validation images, 200 epochs.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    /// Upscaling factor.
    #[arg(long, global = true)]
    pub scale: Option<usize>,
    /// Config override such as `epochs=10` or `model.head=linear` (repeatable).
    #[arg(long = "config", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train a model, keeping the checkpoint with the best validation PSNR.
    Train,
    /// Calibrate and quantize a float checkpoint to uint8.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint or quantized model on a dataset split.
    Eval {
        /// Float checkpoint or quantized model.
        #[arg(long)]
        model: PathBuf,
        /// Quantized model to compare against a float `--model`.
        #[arg(long)]
        uint8: Option<PathBuf>,
        #[arg(long, default_value = "rgb")]
        mode: MetricMode,
        /// Border pixels excluded on each side; 0 for rgb and the scale for y by default.
        #[arg(long)]
        shave: Option<usize>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Upscale one PNG.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print parameter counts, layer shapes and the deployment lint.
    Inspect {
        /// Also list the quantization parameters of this quantized model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train clipped and linear output-head twins and compare their uint8 drops.
    Ablate,
    /// Write a synthetic dataset of procedural images.
    Synth {
        #[arg(long, default_value_t = 40)]
        count: usize,
        /// Side of each square high-resolution image.
        #[arg(long, default_value_t = 192)]
        size: usize,
    },
    /// Repeat the run recorded in a run manifest.
    Rerun { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Quantize { .. } => "quantize",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Inspect { .. } => "inspect",
            Command::Ablate => "ablate",
            Command::Synth { .. } => "synth",
            Command::Rerun { .. } => "rerun",
        }
    }
}
