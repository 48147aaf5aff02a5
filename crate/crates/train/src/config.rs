//! Run configuration: data, architecture and optimisation settings in one
//! TOML document.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use finenet_core::error::{Error, Result};
use finenet_core::model::{config_hash, ModelConfig, OffsetMode};
use finenet_data::DataConfig;

/// What a training run optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Reduced enhancement model of the two-stage strategy.
    Stage1,
    Enhance,
    Interp,
    /// Combination module, trained on frozen branch outputs.
    Combine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Stage1, Stage::Enhance, Stage::Interp, Stage::Combine];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Enhance => "enhance",
            Stage::Interp => "interp",
            Stage::Combine => "combine",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}, expected stage1, enhance, interp or combine")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `min_lr` over `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds parameter initialisation and batch order.
    pub seed: u64,
    /// Total optimisation steps of a stage.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: Schedule,
    pub min_lr: f64,
    pub log_every: usize,
    /// Validation cadence in steps; 0 disables validation.
    pub val_every: usize,
    /// Validations without improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Cap on validation windows per check.
    pub max_val_windows: usize,
    /// Train on stage-1 outputs instead of raw degraded frames.
    pub two_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 200_000,
            batch_size: 12,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            schedule: Schedule::Constant,
            min_lr: 0.0,
            log_every: 10,
            val_every: 500,
            patience: 10,
            max_val_windows: 256,
            two_stage: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("learning rates must satisfy 0 <= min_lr <= lr, lr > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam needs betas in [0, 1) and eps > 0"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm must be finite and non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
                self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Everything one command needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain-data configs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let m = self.model.size_multiple();
        let (h, w) = (self.data.synth.height, self.data.synth.width);
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(format!("frame size {h}x{w} must be divisible by {m} for this model")));
        }
        for b in [&self.model.enhance.branch, &self.model.interp.branch] {
            if b.heatmaps_used() && b.landmarks != self.data.synth.landmarks {
                return Err(Error::config(format!(
                    "model expects {} landmarks, data has {}",
                    b.landmarks, self.data.synth.landmarks
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Desk-scale settings used by the examples and tests.
    pub fn toy() -> Self {
        let mut data = DataConfig { videos: 12, heatmap_sigma: 1.0, ..DataConfig::default() };
        data.synth.height = 16;
        data.synth.width = 16;
        data.synth.frames = 8;
        data.synth.landmarks = 5;
        data.synth.max_speed = 1.0;
        data.blur.max_length = 5.0;
        data.blur.max_smoothing = 0.4;
        let train = TrainConfig { steps: 600, batch_size: 4, lr: 1e-3, val_every: 100, ..TrainConfig::default() };
        RunConfig { data, model: ModelConfig::toy(16, 5), train }
    }
}

/// Ablation presets: each one is a transformation of the model config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two plain convolutions estimate offsets; heatmaps are then unused.
    NoFoc,
    /// FOC modules without landmark heatmaps.
    NoLandmarks,
    /// Fuse branch features instead of branch outputs.
    EarlyFusion,
    /// All four neighbours per interpolation direction.
    FourFrame,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::NoFoc, Preset::NoLandmarks, Preset::EarlyFusion, Preset::FourFrame];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::NoFoc => "no-foc",
            Preset::NoLandmarks => "no-landmarks",
            Preset::EarlyFusion => "early-fusion",
            Preset::FourFrame => "four-frame",
        }
    }

    pub fn apply(self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        match self {
            Preset::NoFoc => {
                for b in [&mut m.enhance.branch, &mut m.interp.branch] {
                    b.offsets = OffsetMode::Plain;
                    b.use_heatmaps = false;
                }
            }
            Preset::NoLandmarks => {
                m.enhance.branch.use_heatmaps = false;
                m.interp.branch.use_heatmaps = false;
            }
            Preset::EarlyFusion => m.fusion = finenet_core::model::FusionMode::Early,
            Preset::FourFrame => m.interp.four_frame = true,
        }
        m
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.beta1, t.beta2, t.lr, t.batch_size), (0.9, 0.999, 1e-4, 12));
        assert_eq!((t.clip_norm, t.val_every, t.patience), (10.0, 500, 10));
        assert_eq!(t.schedule, Schedule::Constant);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 5\n[data.synth]\nheight = 64\nwidth = 64\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml("[train]\nstepz = 5\n").unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn cosine_schedule_ends_at_min() {
        let t = TrainConfig { schedule: Schedule::Cosine, steps: 100, lr: 1e-3, min_lr: 1e-5, ..TrainConfig::default() };
        assert_eq!(t.lr_at(0), 1e-3);
        assert!((t.lr_at(100) - 1e-5).abs() < 1e-15);
        assert!(t.lr_at(50) < t.lr_at(10));
    }

    #[test]
    fn presets_are_valid_models() {
        for p in Preset::ALL {
            let m = p.apply(&ModelConfig::toy(16, 5));
            m.validate().unwrap();
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
    }
}
