use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Dual-branch face video deblurring: data synthesis, training,
/// evaluation and inference.
#[derive(Debug, Parser)]
#[command(name = "finenet", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config with [data], [model] and [train] tables; defaults apply
    /// to anything left out.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Seed for data synthesis and training (sets data.seed and train.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic face videos, degrade them and write a dataset.
    SynthData {
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check landmark sidecars and write heatmap previews.
    GenHeatmaps {
        #[arg(long)]
        data: PathBuf,
        /// Preview directory; defaults to `<data>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage; checkpoints go to the run directory.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Continue from `<run>/<stage>.ckpt`.
        #[arg(long)]
        resume: bool,
        /// Total steps for the stage (overrides train.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate all three outputs on a split and write a JSON-lines report.
    Eval {
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Report path; defaults to `<run>/eval-<split>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        two_stage: bool,
    },
    /// Deblur a directory of frames: one PNG per input frame.
    Deblur {
        /// Video directory with `*.png` frames, optional `sharp/` and
        /// `landmarks.txt`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        two_stage: bool,
        /// Heatmap sigma in pixels (defaults to data.heatmap_sigma).
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Finite-difference gradient checks of the differentiable operations.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate an ablated variant.
    Ablate {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long)]
        data: PathBuf,
        /// Parent run directory; the variant goes to `<run>/<preset>`.
        #[arg(long)]
        run: PathBuf,
        /// Steps per stage (overrides train.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Stage1,
    Enhance,
    Interp,
    Combine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    NoFoc,
    NoLandmarks,
    EarlyFusion,
    FourFrame,
}

impl From<StageArg> for finenet_train::Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Stage1 => finenet_train::Stage::Stage1,
            StageArg::Enhance => finenet_train::Stage::Enhance,
            StageArg::Interp => finenet_train::Stage::Interp,
            StageArg::Combine => finenet_train::Stage::Combine,
        }
    }
}

impl From<SplitArg> for finenet_data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => finenet_data::Split::Train,
            SplitArg::Val => finenet_data::Split::Val,
            SplitArg::Test => finenet_data::Split::Test,
        }
    }
}

impl From<PresetArg> for finenet_train::Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::NoFoc => finenet_train::Preset::NoFoc,
            PresetArg::NoLandmarks => finenet_train::Preset::NoLandmarks,
            PresetArg::EarlyFusion => finenet_train::Preset::EarlyFusion,
            PresetArg::FourFrame => finenet_train::Preset::FourFrame,
        }
    }
}
