//! Enhancement branch: align the four neighbours to the target frame, fuse
//! the five level-1 features and reconstruct a sharper target.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::face_prior::HeatmapStack;
use crate::foc::{Foc, FocConfig, OffsetEstimator, PlainOffsets};
use crate::frame::{Frame, FrameWindow};
use crate::model::{EnhanceConfig, OffsetMode};
use crate::nn::{scoped, DeformConv2d, ParamStore};
use crate::ops::FeatureMap;
use crate::pyramid::{check_frame_size, FeatureExtractor, FeaturePyramid, Fusion, PyramidAligner, PyramidVars, ReconstructionHead};

/// Neighbour positions in a five-frame window.
pub const NEIGHBORS: [usize; 4] = [0, 1, 3, 4];

#[derive(Clone, Debug)]
struct Cascade {
    offsets: OffsetEstimator,
    deform: DeformConv2d,
}

/// Intermediate results of one enhancement pass.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceVars {
    /// Level-1 features in window order; index 2 is the target's own feature.
    pub aligned: [Var; 5],
    pub fused: Option<Var>,
    /// Unclamped output image.
    pub output: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EnhanceBranch {
    config: EnhanceConfig,
    extractor: FeatureExtractor,
    aligner: PyramidAligner,
    cascade: Option<Cascade>,
    fusion: Option<Fusion>,
    recon: Option<ReconstructionHead>,
}

impl EnhanceBranch {
    pub fn new(store: &mut ParamStore, name: &str, config: &EnhanceConfig) -> Result<Self> {
        let mut b = EnhanceBranch::features_only(store, name, config)?;
        let c = &config.branch;
        b.fusion = Some(Fusion::new(store, &scoped(name, "fusion"), 5, c.width, c.fusion_blocks));
        b.recon = Some(ReconstructionHead::new(store, &scoped(name, "recon"), c.width, c.recon_blocks));
        Ok(b)
    }

    /// Extraction and alignment only, for early fusion.
    pub fn features_only(store: &mut ParamStore, name: &str, config: &EnhanceConfig) -> Result<Self> {
        let c = &config.branch;
        c.validate()?;
        let extractor = FeatureExtractor::new(store, &scoped(name, "extract"), c.width, c.extractor_blocks);
        let aligner = PyramidAligner::new(store, &scoped(name, "align"), c, 2)?;
        let cascade = if config.cascade {
            let est_name = scoped(name, "cascade.offsets");
            let offsets = match c.offsets {
                OffsetMode::Foc => {
                    let mut fc = FocConfig::new(2 * c.width, c.foc_simple_width);
                    fc.depth = c.foc_depth;
                    OffsetEstimator::Foc(Foc::new(store, &est_name, fc)?)
                }
                OffsetMode::Plain => OffsetEstimator::Plain(PlainOffsets::new(store, &est_name, 2 * c.width, false, c.width)),
            };
            let deform = DeformConv2d::new(store, &scoped(name, "cascade.deform"), c.width, c.width);
            Some(Cascade { offsets, deform })
        } else {
            None
        };
        Ok(EnhanceBranch { config: config.clone(), extractor, aligner, cascade, fusion: None, recon: None })
    }

    pub fn config(&self) -> &EnhanceConfig {
        &self.config
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.aligner.uses_heatmaps()
    }

    pub fn size_multiple(&self) -> usize {
        self.config.branch.size_multiple()
    }

    pub fn pyramid(&self, g: &mut Graph<'_>, frame: Var) -> PyramidVars {
        self.extractor.forward(g, frame)
    }

    /// Aligns `neighbor` to `target`; `heatmaps` is `(neighbor, target)`.
    pub fn align(&self, g: &mut Graph<'_>, target: &PyramidVars, neighbor: &PyramidVars, heatmaps: Option<(Var, Var)>) -> Var {
        let hm = heatmaps.map(|(n, t)| [n, t]);
        let warp = self.aligner.forward(g, &[*neighbor, *target], 0, hm.as_ref().map(|h| &h[..]));
        match &self.cascade {
            None => warp.aligned,
            Some(c) => {
                let off = c.offsets.forward(g, &[warp.aligned, target.level(0)], None, None);
                c.deform.forward(g, warp.aligned, off.offsets, off.mask)
            }
        }
    }

    /// Extracts pyramids and aligns every neighbour; frames are `(B, 3, H, W)`.
    pub fn aligned_features(&self, g: &mut Graph<'_>, frames: &[Var; 5], heatmaps: Option<&[Var; 5]>) -> [Var; 5] {
        let pyramids: Vec<PyramidVars> = frames.iter().map(|&f| self.pyramid(g, f)).collect();
        let target = pyramids[FrameWindow::CENTER];
        let mut aligned = [target.level(0); 5];
        for i in NEIGHBORS {
            let hm = heatmaps.map(|h| (h[i], h[FrameWindow::CENTER]));
            aligned[i] = self.align(g, &target, &pyramids[i], hm);
        }
        aligned
    }

    pub fn forward(&self, g: &mut Graph<'_>, frames: &[Var; 5], heatmaps: Option<&[Var; 5]>) -> EnhanceVars {
        let aligned = self.aligned_features(g, frames, heatmaps);
        let (Some(fusion), Some(recon)) = (&self.fusion, &self.recon) else {
            return EnhanceVars { aligned, fused: None, output: None };
        };
        let fused = fusion.forward(g, &aligned);
        let residual = recon.forward(g, fused);
        let output = g.add(residual, frames[FrameWindow::CENTER]);
        EnhanceVars { aligned, fused: Some(fused), output: Some(output) }
    }

    fn head(&self) -> Result<(&Fusion, &ReconstructionHead)> {
        match (&self.fusion, &self.recon) {
            (Some(f), Some(r)) => Ok((f, r)),
            _ => Err(Error::config("enhancement branch was built without fusion and reconstruction")),
        }
    }

    fn check_heatmap_presence(&self, present: bool) -> Result<()> {
        match (present, self.uses_heatmaps()) {
            (true, false) => Err(Error::config("heatmaps given to an enhancement branch configured without them")),
            (false, true) => Err(Error::config("enhancement branch needs heatmaps")),
            _ => Ok(()),
        }
    }

    pub fn extract_pyramid(&self, store: &ParamStore, frame: &Frame) -> Result<FeaturePyramid> {
        check_frame_size(frame.height(), frame.width(), 4)?;
        let mut g = Graph::with_params(store);
        let x = g.constant(frame.tensor().clone());
        let p = self.pyramid(&mut g, x);
        FeaturePyramid::from_vars(&g, p)
    }

    pub fn align_neighbor(
        &self,
        store: &ParamStore,
        pyr_t: &FeaturePyramid,
        pyr_n: &FeaturePyramid,
        hm_t: Option<&HeatmapStack>,
        hm_n: Option<&HeatmapStack>,
    ) -> Result<FeatureMap> {
        let w = self.config.branch.width;
        for p in [pyr_t, pyr_n] {
            if p.level(1).channels() != w {
                return Err(Error::invalid(format!("pyramid has {} channels, branch width is {w}", p.level(1).channels())));
            }
        }
        let (h, wd) = (pyr_t.level(1).height(), pyr_t.level(1).width());
        if (pyr_n.level(1).height(), pyr_n.level(1).width()) != (h, wd) {
            return Err(Error::invalid("target and neighbour pyramids differ in size"));
        }
        check_frame_size(h, wd, self.size_multiple())?;
        if hm_t.is_some() != hm_n.is_some() {
            return Err(Error::invalid("give heatmaps for both frames or neither"));
        }
        self.check_heatmap_presence(hm_t.is_some())?;
        for hm in [hm_t, hm_n].into_iter().flatten() {
            check_heatmap(hm, self.config.branch.landmarks, h, wd)?;
        }
        let mut g = Graph::with_params(store);
        let pt = pyr_t.to_vars(&mut g);
        let pn = pyr_n.to_vars(&mut g);
        let hm = match (hm_n, hm_t) {
            (Some(n), Some(t)) => Some((g.constant(n.tensor().clone()), g.constant(t.tensor().clone()))),
            _ => None,
        };
        let a = self.align(&mut g, &pt, &pn, hm);
        FeatureMap::new(g.value(a).clone())
    }

    pub fn fuse_aligned(&self, store: &ParamStore, aligned: &[FeatureMap]) -> Result<FeatureMap> {
        let (fusion, _) = self.head()?;
        check_maps(aligned, 5, self.config.branch.width)?;
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = aligned.iter().map(|a| g.constant(a.tensor().clone())).collect();
        let out = fusion.forward(&mut g, &vars);
        FeatureMap::new(g.value(out).clone())
    }

    /// Inference-mode reconstruction, clamped to `[0, 1]`.
    pub fn reconstruct(&self, store: &ParamStore, feature: &FeatureMap, target: &Frame) -> Result<Frame> {
        let (_, recon) = self.head()?;
        check_maps(std::slice::from_ref(feature), 1, self.config.branch.width)?;
        if (feature.height(), feature.width()) != (target.height(), target.width()) {
            return Err(Error::invalid("feature and target frame differ in size"));
        }
        let mut g = Graph::with_params(store);
        let f = g.constant(feature.tensor().clone());
        let t = g.constant(target.tensor().clone());
        let r = recon.forward(&mut g, f);
        let out = g.add(r, t);
        Frame::from_clamped(g.value(out))
    }

    /// `I^en` for one window, clamped to `[0, 1]`.
    pub fn enhance(&self, store: &ParamStore, window: &FrameWindow, heatmaps: Option<&[HeatmapStack]>) -> Result<Frame> {
        self.head()?;
        check_frame_size(window.height(), window.width(), self.size_multiple())?;
        self.check_heatmap_presence(heatmaps.is_some())?;
        if let Some(hm) = heatmaps {
            check_window_heatmaps(hm, self.config.branch.landmarks, window.height(), window.width())?;
        }
        let mut g = Graph::with_params(store);
        let frames: [Var; 5] = std::array::from_fn(|i| g.constant(window.frames[i].tensor().clone()));
        let hm: Option<[Var; 5]> = heatmaps.map(|h| std::array::from_fn(|i| g.constant(h[i].tensor().clone())));
        let out = self.forward(&mut g, &frames, hm.as_ref()).output.expect("head present");
        Frame::from_clamped(g.value(out))
    }
}

pub(crate) fn check_heatmap(hm: &HeatmapStack, landmarks: usize, h: usize, w: usize) -> Result<()> {
    if hm.landmarks() != landmarks || hm.height() != h || hm.width() != w {
        return Err(Error::invalid(format!(
            "heatmap stack is {}x{}x{}, expected {landmarks}x{h}x{w}",
            hm.landmarks(),
            hm.height(),
            hm.width()
        )));
    }
    Ok(())
}

pub(crate) fn check_window_heatmaps(hm: &[HeatmapStack], landmarks: usize, h: usize, w: usize) -> Result<()> {
    if hm.len() != FrameWindow::LEN {
        return Err(Error::invalid(format!("expected {} heatmap stacks, got {}", FrameWindow::LEN, hm.len())));
    }
    hm.iter().try_for_each(|s| check_heatmap(s, landmarks, h, w))
}

pub(crate) fn check_maps(maps: &[FeatureMap], count: usize, channels: usize) -> Result<()> {
    if maps.len() != count {
        return Err(Error::invalid(format!("expected {count} feature maps, got {}", maps.len())));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    for m in maps {
        if m.channels() != channels || (m.height(), m.width()) != (h, w) {
            return Err(Error::invalid(format!(
                "feature map is {}x{}x{}, expected {channels}x{h}x{w}",
                m.channels(),
                m.height(),
                m.width()
            )));
        }
    }
    Ok(())
}
