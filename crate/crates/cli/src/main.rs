//! `noiseprint` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "noiseprint", version, about = "Camera-model noise fingerprints")]
pub struct Cli {
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Seed for every random choice of the run (default: config value or 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON config for the subcommand; flags take precedence. A resolved
    /// config echo file is accepted as well.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic multi-camera dataset.
    Simulate {
        #[arg(long)]
        models: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the extractor as a denoiser.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        net_depth: Option<usize>,
        #[arg(long)]
        net_width: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Siamese training on a simulated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Start from these weights instead of a random init.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        net_depth: Option<usize>,
        #[arg(long)]
        net_width: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the noiseprint of an image.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PNG preview, next to the output unless a path is given.
        #[arg(long, num_args = 0..=1)]
        png: Option<Option<PathBuf>>,
    },
    /// Blind splicing localization heatmap.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        dims: Option<usize>,
    },
    /// Score heatmaps against ground-truth masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Camera-model identification by nearest reference noiseprint.
    Identify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        crop: Option<usize>,
        /// Train images per model averaged into each reference.
        #[arg(long)]
        reference_images: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Build spliced composites and masks from a dataset split.
    Splice {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::error_line(&e));
            ExitCode::from(1)
        }
    }
}
