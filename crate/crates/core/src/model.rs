//! Architecture configuration shared by the branches.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::face_prior::DEFAULT_LANDMARKS;

/// How deformable offsets are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    /// Encoder-decoder FOC modules.
    Foc,
    /// Two plain convolutions per level.
    Plain,
}

/// Settings common to the enhancement and interpolation branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    /// Feature channels.
    pub width: usize,
    /// Landmarks per heatmap stack.
    pub landmarks: usize,
    /// Feed heatmaps to the finest-level offset estimator.
    pub use_heatmaps: bool,
    pub offsets: OffsetMode,
    /// Base width of the finest-level FOC.
    pub foc_width: usize,
    /// Base width of the simplified FOCs on coarse levels.
    pub foc_simple_width: usize,
    pub foc_depth: usize,
    pub extractor_blocks: usize,
    pub fusion_blocks: usize,
    pub recon_blocks: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            width: 32,
            landmarks: DEFAULT_LANDMARKS,
            use_heatmaps: true,
            offsets: OffsetMode::Foc,
            foc_width: 32,
            foc_simple_width: 16,
            foc_depth: 2,
            extractor_blocks: 5,
            fusion_blocks: 2,
            recon_blocks: 5,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.foc_width == 0 || self.foc_simple_width == 0 {
            return Err(Error::config("branch widths must be positive"));
        }
        if self.use_heatmaps && self.landmarks == 0 {
            return Err(Error::config("heatmaps enabled with zero landmarks"));
        }
        if self.use_heatmaps && self.offsets == OffsetMode::Plain {
            return Err(Error::config("the plain offset estimator does not take heatmaps"));
        }
        if self.foc_depth == 0 {
            return Err(Error::config("foc_depth must be at least 1"));
        }
        Ok(())
    }

    /// Frame sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        // Three pyramid levels, then FOC halvings on the coarsest one.
        4 << if self.offsets == OffsetMode::Foc { self.foc_depth } else { 0 }
    }

    pub fn heatmaps_used(&self) -> bool {
        self.use_heatmaps && self.offsets == OffsetMode::Foc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    #[serde(flatten)]
    pub branch: BranchConfig,
    /// One cascade refinement at the finest level after pyramid alignment.
    pub cascade: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig { branch: BranchConfig::default(), cascade: true }
    }
}

impl EnhanceConfig {
    /// Reduced model used as the first of two stages: half width, no
    /// heatmaps.
    pub fn stage1_of(full: &BranchConfig) -> EnhanceConfig {
        let half = |v: usize| (v / 2).max(1);
        EnhanceConfig {
            branch: BranchConfig {
                width: half(full.width),
                use_heatmaps: false,
                foc_width: half(full.foc_width),
                foc_simple_width: half(full.foc_simple_width),
                ..full.clone()
            },
            cascade: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpConfig {
    #[serde(flatten)]
    pub branch: BranchConfig,
    /// Use all four neighbours per direction instead of three.
    pub four_frame: bool,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig { branch: BranchConfig::default(), four_frame: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinerConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig { width: 32, blocks: 9 }
    }
}

/// Late fusion of output images or early fusion of branch features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Late,
    Early,
}

/// Full FineNet architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enhance: EnhanceConfig,
    pub interp: InterpConfig,
    pub combiner: CombinerConfig,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enhance: EnhanceConfig::default(),
            interp: InterpConfig::default(),
            combiner: CombinerConfig::default(),
            fusion: FusionMode::Late,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments.
    pub fn toy(width: usize, landmarks: usize) -> Self {
        let branch = BranchConfig {
            width,
            landmarks,
            use_heatmaps: true,
            offsets: OffsetMode::Foc,
            foc_width: width / 2,
            foc_simple_width: (width / 4).max(2),
            foc_depth: 2,
            extractor_blocks: 1,
            fusion_blocks: 2,
            recon_blocks: 1,
        };
        ModelConfig {
            enhance: EnhanceConfig { branch: branch.clone(), cascade: true },
            interp: InterpConfig { branch, four_frame: false },
            combiner: CombinerConfig { width: width / 2, blocks: 9 },
            fusion: FusionMode::Late,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enhance.branch.validate()?;
        self.interp.branch.validate()?;
        if self.combiner.width == 0 {
            return Err(Error::config("combiner width must be positive"));
        }
        if self.fusion == FusionMode::Early && self.enhance.branch.width != self.interp.branch.width {
            return Err(Error::config("early fusion needs equal branch widths"));
        }
        if self.fusion == FusionMode::Early && self.enhance.branch.landmarks != self.interp.branch.landmarks {
            return Err(Error::config("early fusion needs equal landmark counts"));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        self.enhance.branch.size_multiple().max(self.interp.branch.size_multiple()).max(4)
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("plain-data configs serialize");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
