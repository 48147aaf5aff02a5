//! Late fusion of the two branch outputs, and the early-fusion variant that
//! merges branch features instead.

use crate::autograd::{Graph, Var};
use crate::enhance::{check_maps, check_window_heatmaps, EnhanceBranch};
use crate::error::{Error, Result};
use crate::face_prior::HeatmapStack;
use crate::frame::{Frame, FrameWindow};
use crate::interp::{InterpBranch, NEIGHBOR_WINDOW_INDEX};
use crate::model::{CombinerConfig, ModelConfig};
use crate::nn::{scoped, Conv2d, Init, ParamStore, ResStack};
use crate::ops::FeatureMap;
use crate::pyramid::{check_frame_size, Fusion, ReconstructionHead};

/// `concat -> conv -> 2x stride-2 conv -> residual blocks -> 2x (upsample,
/// conv) -> projection`, added to the mean of the two inputs.
///
/// The projection also sees the six input channels at full resolution.
#[derive(Clone, Debug)]
pub struct Combiner {
    config: CombinerConfig,
    first: Conv2d,
    down: [Conv2d; 2],
    blocks: ResStack,
    up: [Conv2d; 2],
    project: Conv2d,
}

impl Combiner {
    pub const SIZE_MULTIPLE: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, config: &CombinerConfig) -> Result<Self> {
        let w = config.width;
        if w == 0 {
            return Err(Error::config("combiner width must be positive"));
        }
        let conv = |store: &mut ParamStore, n: &str, i, o, s, init| Conv2d::new(store, &scoped(name, n), i, o, 3, s, init);
        Ok(Combiner {
            config: config.clone(),
            first: conv(store, "first", 6, w, 1, Init::DEFAULT),
            down: [conv(store, "down1", w, 2 * w, 2, Init::DEFAULT), conv(store, "down2", 2 * w, 4 * w, 2, Init::DEFAULT)],
            blocks: ResStack::new(store, &scoped(name, "blocks"), 4 * w, config.blocks),
            up: [conv(store, "up1", 4 * w, 2 * w, 1, Init::DEFAULT), conv(store, "up2", 2 * w, w, 1, Init::DEFAULT)],
            project: conv(store, "project", w + 6, 3, 1, Init::Zeros),
        })
    }

    pub fn config(&self) -> &CombinerConfig {
        &self.config
    }

    pub fn project(&self) -> &Conv2d {
        &self.project
    }

    /// Unclamped `Î`.
    pub fn forward(&self, g: &mut Graph<'_>, enhanced: Var, interpolated: Var) -> Var {
        let x = g.concat(&[enhanced, interpolated]);
        let h = self.first.forward(g, x);
        let mut h = g.silu(h);
        for conv in &self.down {
            let d = conv.forward(g, h);
            h = g.silu(d);
        }
        h = self.blocks.forward(g, h);
        for conv in &self.up {
            let u = g.upsample2x(h);
            let c = conv.forward(g, u);
            h = g.silu(c);
        }
        let skip = g.concat(&[h, x]);
        let residual = self.project.forward(g, skip);
        let pair = g.add(enhanced, interpolated);
        let mean = g.scale(pair, 0.5);
        g.add(residual, mean)
    }

    /// `Î` clamped to `[0, 1]`.
    pub fn combine(&self, store: &ParamStore, enhanced: &Frame, interpolated: &Frame) -> Result<Frame> {
        Frame::from_clamped(&self.combine_raw(store, enhanced, interpolated)?)
    }

    /// `Î` before clamping.
    pub fn combine_raw(&self, store: &ParamStore, enhanced: &Frame, interpolated: &Frame) -> Result<crate::Tensor> {
        if (enhanced.height(), enhanced.width()) != (interpolated.height(), interpolated.width()) {
            return Err(Error::invalid("enhanced and interpolated frames differ in size"));
        }
        check_frame_size(enhanced.height(), enhanced.width(), Self::SIZE_MULTIPLE)?;
        let mut g = Graph::with_params(store);
        let e = g.constant(enhanced.tensor().clone());
        let i = g.constant(interpolated.tensor().clone());
        let out = self.forward(&mut g, e, i);
        Ok(g.value(out).clone())
    }
}

/// Both branches up to their features, then one head over all seven maps.
#[derive(Clone, Debug)]
pub struct EarlyFusion {
    enhance: EnhanceBranch,
    interp: InterpBranch,
    fusion: Fusion,
    recon: ReconstructionHead,
}

impl EarlyFusion {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.enhance.branch.width;
        if config.interp.branch.width != w {
            return Err(Error::config("early fusion needs equal branch widths"));
        }
        Ok(EarlyFusion {
            enhance: EnhanceBranch::features_only(store, "enhance", &config.enhance)?,
            interp: InterpBranch::features_only(store, "interp", &config.interp)?,
            fusion: Fusion::new(store, "early.fusion", 7, w, config.enhance.branch.fusion_blocks),
            recon: ReconstructionHead::new(store, "early.recon", w, config.enhance.branch.recon_blocks),
        })
    }

    pub fn enhance(&self) -> &EnhanceBranch {
        &self.enhance
    }

    pub fn interp(&self) -> &InterpBranch {
        &self.interp
    }

    pub fn size_multiple(&self) -> usize {
        self.enhance.size_multiple().max(self.interp.size_multiple())
    }

    /// Head over five enhancement features and two directional features,
    /// added to the target frame. Unclamped.
    pub fn head(&self, g: &mut Graph<'_>, enh: &[Var; 5], interp: &[Var; 2], target: Var) -> Var {
        let maps = [enh[0], enh[1], enh[2], enh[3], enh[4], interp[0], interp[1]];
        let fused = self.fusion.forward(g, &maps);
        let residual = self.recon.forward(g, fused);
        g.add(residual, target)
    }

    /// The five aligned enhancement features and the two directional
    /// interpolation features of a window batch.
    pub fn features(&self, g: &mut Graph<'_>, frames: &[Var; 5], heatmaps: Option<&[Var; 5]>) -> ([Var; 5], [Var; 2]) {
        let enh = self.enhance.aligned_features(g, frames, self.enhance.uses_heatmaps().then_some(heatmaps).flatten());
        let neighbors = NEIGHBOR_WINDOW_INDEX.map(|i| frames[i]);
        let nh = heatmaps.filter(|_| self.interp.uses_heatmaps()).map(|h| NEIGHBOR_WINDOW_INDEX.map(|i| h[i]));
        let inter = self.interp.forward(g, &neighbors, nh.as_ref()).directional;
        (enh, inter)
    }

    /// Unclamped output for a window batch. Heatmaps follow window order.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &[Var; 5], heatmaps: Option<&[Var; 5]>) -> Var {
        let (enh, inter) = self.features(g, frames, heatmaps);
        self.head(g, &enh, &inter, frames[FrameWindow::CENTER])
    }

    /// Validated head: five enhancement features, two directional features
    /// and the target frame they refine.
    pub fn combine_early(&self, store: &ParamStore, enh: &[FeatureMap], interp: &[FeatureMap], target: &Frame) -> Result<Frame> {
        let w = self.enhance.config().branch.width;
        check_maps(enh, 5, w)?;
        check_maps(interp, 2, w)?;
        let size = (target.height(), target.width());
        if (enh[0].height(), enh[0].width()) != size || (interp[0].height(), interp[0].width()) != size {
            return Err(Error::invalid("feature maps differ in size from the target frame"));
        }
        let mut g = Graph::with_params(store);
        let e: [Var; 5] = std::array::from_fn(|i| g.constant(enh[i].tensor().clone()));
        let d: [Var; 2] = std::array::from_fn(|i| g.constant(interp[i].tensor().clone()));
        let t = g.constant(target.tensor().clone());
        let out = self.head(&mut g, &e, &d, t);
        Frame::from_clamped(g.value(out))
    }

    pub fn deblur(&self, store: &ParamStore, window: &FrameWindow, heatmaps: Option<&[HeatmapStack]>) -> Result<Frame> {
        check_frame_size(window.height(), window.width(), self.size_multiple())?;
        let needs = self.enhance.uses_heatmaps() || self.interp.uses_heatmaps();
        if needs != heatmaps.is_some() {
            return Err(Error::config("heatmap presence does not match the early-fusion configuration"));
        }
        if let Some(hm) = heatmaps {
            let l = self.enhance.config().branch.landmarks;
            check_window_heatmaps(hm, l, window.height(), window.width())?;
        }
        let mut g = Graph::with_params(store);
        let frames: [Var; 5] = std::array::from_fn(|i| g.constant(window.frames[i].tensor().clone()));
        let hm: Option<[Var; 5]> = heatmaps.map(|h| std::array::from_fn(|i| g.constant(h[i].tensor().clone())));
        let out = self.forward(&mut g, &frames, hm.as_ref());
        Frame::from_clamped(g.value(out))
    }
}
