//! Training, checkpoints, inference and evaluation for FineNet.
//!
//! Stages run in order: the two branches (and optionally the reduced
//! stage-1 model) first, then the combination module on frozen branch
//! outputs.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod optim;
pub mod report;
pub mod stage;
pub mod trainer;

pub use checkpoint::{Checkpoint, RunDir};
pub use config::{Preset, RunConfig, Schedule, Stage, TrainConfig};
pub use infer::{evaluate, two_stage_deblur, DeblurResult, FineNet, Loaded};
pub use report::Report;
pub use trainer::{train_stage, Dependencies, TrainData, TrainOutcome, Trainer};
