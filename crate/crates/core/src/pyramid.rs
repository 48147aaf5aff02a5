//! Three-level feature pyramids and the coarse-to-fine deformable warp shared
//! by both branches.
//!
//! For a set of input frames and a warp source among them, each level runs
//!
//! ```text
//! level 3:  dP3 = Est3(F3...)                       A3 = DConv(F3_src, dP3)
//! level 2:  dP2 = 2*up(dP3) + Est2(Conv(F2...), 2*up(dP3))
//!           A2  = Conv(DConv(F2_src, dP2) ++ up(A3))
//! level 1:  dP1 = 2*up(dP2) + Est1(Conv(F1...), 2*up(dP2), H...)
//!           A1  = Conv(DConv(F1_src, dP1) ++ up(A2))
//! ```
//!
//! Upsampled offsets are doubled so they stay in pixels of the finer level.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::foc::{Foc, FocConfig, OffsetEstimator, OffsetVars, PlainOffsets};
use crate::model::{BranchConfig, OffsetMode};
use crate::nn::{scoped, Conv2d, DeformConv2d, Init, ParamStore, ResStack};
use crate::ops::FeatureMap;

pub const LEVELS: usize = 3;

/// Feature maps of one frame, finest first.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars(pub [Var; LEVELS]);

impl PyramidVars {
    pub fn level(&self, l: usize) -> Var {
        self.0[l]
    }
}

/// Residual feature extractor followed by two stride-2 convolutions.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    first: Conv2d,
    blocks: ResStack,
    down: [Conv2d; 2],
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, blocks: usize) -> Self {
        FeatureExtractor {
            first: Conv2d::new(store, &scoped(name, "first"), 3, width, 3, 1, Init::DEFAULT),
            blocks: ResStack::new(store, &scoped(name, "blocks"), width, blocks),
            down: [
                Conv2d::new(store, &scoped(name, "down2"), width, width, 3, 2, Init::DEFAULT),
                Conv2d::new(store, &scoped(name, "down3"), width, width, 3, 2, Init::DEFAULT),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, frame: Var) -> PyramidVars {
        let f = self.first.forward(g, frame);
        let f = g.silu(f);
        let l1 = self.blocks.forward(g, f);
        let l2 = self.down[0].forward(g, l1);
        let l2 = g.silu(l2);
        let l3 = self.down[1].forward(g, l2);
        let l3 = g.silu(l3);
        PyramidVars([l1, l2, l3])
    }
}

/// `2 * up2(offsets)`: carries an offset field to the next finer level.
pub fn upscale_offsets(g: &mut Graph<'_>, offsets: Var) -> Var {
    let up = g.upsample2x(offsets);
    g.scale(up, 2.0)
}

/// Output of [`PyramidAligner::forward`].
#[derive(Clone, Copy, Debug)]
pub struct WarpVars {
    /// Finest-level warped feature.
    pub aligned: Var,
    /// Final offsets per level, finest first.
    pub offsets: [OffsetVars; LEVELS],
}

#[derive(Clone, Debug)]
pub struct PyramidAligner {
    inputs: usize,
    estimators: Vec<OffsetEstimator>,
    deform: Vec<DeformConv2d>,
    // Index 0 is level 1, index 1 is level 2.
    squeeze: Vec<Conv2d>,
    merge: Vec<Conv2d>,
    heatmaps: bool,
}

impl PyramidAligner {
    /// `inputs` frames feed the offset estimators. With heatmaps enabled the
    /// finest estimator takes `inputs * landmarks` heatmap channels.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BranchConfig, inputs: usize) -> Result<Self> {
        let w = cfg.width;
        let heatmaps = cfg.heatmaps_used();
        let mut estimators = Vec::with_capacity(LEVELS);
        for level in 1..=LEVELS {
            let est_name = scoped(name, &format!("offsets{level}"));
            // The coarsest level sees the raw concatenation; finer levels see a
            // squeezed feature plus the upscaled coarser offsets.
            let (feature_channels, prior) = if level == LEVELS { (inputs * w, false) } else { (w, true) };
            let est = match cfg.offsets {
                OffsetMode::Plain => OffsetEstimator::Plain(PlainOffsets::new(store, &est_name, feature_channels, prior, w)),
                OffsetMode::Foc => {
                    let base = if level == 1 { cfg.foc_width } else { cfg.foc_simple_width };
                    let mut fc = FocConfig::new(feature_channels, base).with_prior(prior);
                    fc.depth = cfg.foc_depth;
                    if level == 1 && heatmaps {
                        fc = fc.with_heatmaps(inputs * cfg.landmarks);
                    }
                    OffsetEstimator::Foc(Foc::new(store, &est_name, fc)?)
                }
            };
            estimators.push(est);
        }
        let deform = (1..=LEVELS)
            .map(|l| DeformConv2d::new(store, &scoped(name, &format!("deform{l}")), w, w))
            .collect();
        let squeeze = (1..LEVELS)
            .map(|l| Conv2d::new(store, &scoped(name, &format!("squeeze{l}")), inputs * w, w, 3, 1, Init::DEFAULT))
            .collect();
        let merge = (1..LEVELS)
            .map(|l| Conv2d::new(store, &scoped(name, &format!("merge{l}")), 2 * w, w, 3, 1, Init::DEFAULT))
            .collect();
        Ok(PyramidAligner { inputs, estimators, deform, squeeze, merge, heatmaps })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.heatmaps
    }

    /// Estimators per level, finest first.
    pub fn estimators(&self) -> &[OffsetEstimator] {
        &self.estimators
    }

    /// Warps `pyramids[source]` using offsets estimated from all `pyramids`.
    /// `heatmaps`, one per pyramid, are consumed at the finest level only.
    pub fn forward(&self, g: &mut Graph<'_>, pyramids: &[PyramidVars], source: usize, heatmaps: Option<&[Var]>) -> WarpVars {
        assert_eq!(pyramids.len(), self.inputs, "aligner input count");
        assert_eq!(heatmaps.is_some(), self.heatmaps, "heatmap presence");

        let top = LEVELS - 1;
        let feats: Vec<Var> = pyramids.iter().map(|p| p.level(top)).collect();
        let est = self.estimators[top].forward(g, &feats, None, None);
        let mut offsets = [est; LEVELS];
        let mut aligned = self.deform[top].forward(g, pyramids[source].level(top), est.offsets, est.mask);

        for l in (0..top).rev() {
            let feats: Vec<Var> = pyramids.iter().map(|p| p.level(l)).collect();
            let cat = g.concat(&feats);
            let squeezed = self.squeeze[l].forward(g, cat);
            let squeezed = g.silu(squeezed);
            let prior = upscale_offsets(g, offsets[l + 1].offsets);
            let hm = if l == 0 { heatmaps } else { None };
            let est = self.estimators[l].forward(g, &[squeezed], hm, Some(prior));
            let refined = OffsetVars { offsets: g.add(prior, est.offsets), mask: est.mask };
            offsets[l] = refined;
            let warped = self.deform[l].forward(g, pyramids[source].level(l), refined.offsets, refined.mask);
            let up = g.upsample2x(aligned);
            let cat = g.concat(&[warped, up]);
            let merged = self.merge[l].forward(g, cat);
            aligned = if l == 0 { merged } else { g.silu(merged) };
        }
        WarpVars { aligned, offsets }
    }
}

/// `concat -> 1x1 conv -> residual blocks`; order-sensitive fusion of a fixed
/// number of feature maps.
#[derive(Clone, Debug)]
pub struct Fusion {
    inputs: usize,
    squeeze: Conv2d,
    blocks: ResStack,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, width: usize, blocks: usize) -> Self {
        Fusion {
            inputs,
            squeeze: Conv2d::new(store, &scoped(name, "squeeze"), inputs * width, width, 1, 1, Init::DEFAULT),
            blocks: ResStack::new(store, &scoped(name, "blocks"), width, blocks),
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn forward(&self, g: &mut Graph<'_>, maps: &[Var]) -> Var {
        assert_eq!(maps.len(), self.inputs, "fusion input count");
        let cat = g.concat(maps);
        let h = self.squeeze.forward(g, cat);
        let h = g.silu(h);
        self.blocks.forward(g, h)
    }
}

/// Residual blocks and a zero-initialised projection to RGB.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    blocks: ResStack,
    project: Conv2d,
}

impl ReconstructionHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, blocks: usize) -> Self {
        ReconstructionHead {
            blocks: ResStack::new(store, &scoped(name, "blocks"), width, blocks),
            project: Conv2d::new(store, &scoped(name, "project"), width, 3, 3, 1, Init::Zeros),
        }
    }

    /// RGB residual predicted from `feature`; the caller adds its base image.
    pub fn forward(&self, g: &mut Graph<'_>, feature: Var) -> Var {
        let h = self.blocks.forward(g, feature);
        self.project.forward(g, h)
    }

    pub fn project(&self) -> &Conv2d {
        &self.project
    }
}

/// Three validated feature maps of one frame, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [FeatureMap; LEVELS],
}

impl FeaturePyramid {
    pub fn new(levels: [FeatureMap; LEVELS]) -> Result<Self> {
        let c = levels[0].channels();
        for l in 1..LEVELS {
            let (prev, cur) = (&levels[l - 1], &levels[l]);
            if cur.channels() != c || prev.height() != 2 * cur.height() || prev.width() != 2 * cur.width() {
                return Err(Error::invalid(format!("pyramid level {} does not halve level {}", l + 1, l)));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// Level `l` in `1..=3`.
    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l - 1]
    }

    pub fn levels(&self) -> &[FeatureMap; LEVELS] {
        &self.levels
    }

    pub(crate) fn to_vars(&self, g: &mut Graph<'_>) -> PyramidVars {
        PyramidVars(std::array::from_fn(|l| g.constant(self.levels[l].tensor().clone())))
    }

    pub(crate) fn from_vars(g: &Graph<'_>, vars: PyramidVars) -> Result<Self> {
        let maps = vars.0.map(|v| FeatureMap::new(g.value(v).clone()));
        let [a, b, c] = maps;
        FeaturePyramid::new([a?, b?, c?])
    }
}

/// Frames entering a pyramid must survive the halvings of every level and
/// offset estimator.
pub fn check_frame_size(height: usize, width: usize, multiple: usize) -> Result<()> {
    if height == 0 || width == 0 || height % multiple != 0 || width % multiple != 0 {
        return Err(Error::invalid(format!("frame size {height}x{width} must be divisible by {multiple}")));
    }
    Ok(())
}
