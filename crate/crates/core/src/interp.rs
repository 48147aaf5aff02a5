//! Interpolation branch: synthesise the target frame from its neighbours
//! alone, once forward in time and once backward, then fuse.
//!
//! Everything here takes the four neighbours `[t-2, t-1, t+1, t+2]`, so the
//! target frame cannot leak into the result.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::enhance::{check_heatmap, check_maps};
use crate::error::{Error, Result};
use crate::face_prior::HeatmapStack;
use crate::frame::{Frame, FrameWindow};
use crate::model::InterpConfig;
use crate::nn::{scoped, ParamStore};
use crate::ops::FeatureMap;
use crate::pyramid::{check_frame_size, FeatureExtractor, FeaturePyramid, Fusion, PyramidAligner, PyramidVars, ReconstructionHead};

/// Window positions of the neighbours, in the order the branch consumes them.
pub const NEIGHBOR_WINDOW_INDEX: [usize; 4] = [0, 1, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Ordered neighbour indices (into `[t-2, t-1, t+1, t+2]`) for one direction.
/// The element at position 1 is the warp source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterpTriple {
    pub direction: Direction,
    pub frames: Vec<usize>,
}

impl InterpTriple {
    pub const SOURCE: usize = 1;

    /// `[t-2, t-1, t+1]` or `[t+2, t+1, t-1]`; the four-frame variant appends
    /// the remaining neighbour.
    pub fn new(direction: Direction, four_frame: bool) -> Self {
        let mut frames = match direction {
            Direction::Forward => vec![0, 1, 2],
            Direction::Backward => vec![3, 2, 1],
        };
        if four_frame {
            frames.push(if direction == Direction::Forward { 3 } else { 0 });
        }
        InterpTriple { direction, frames }
    }

    pub fn source(&self) -> usize {
        self.frames[Self::SOURCE]
    }
}

/// Intermediate results of one interpolation pass.
#[derive(Clone, Copy, Debug)]
pub struct InterpVars {
    /// Forward and backward synthesised level-1 features.
    pub directional: [Var; 2],
    pub fused: Option<Var>,
    /// Unclamped output image.
    pub output: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct InterpBranch {
    config: InterpConfig,
    extractor: FeatureExtractor,
    forward: PyramidAligner,
    backward: PyramidAligner,
    fusion: Option<Fusion>,
    recon: Option<ReconstructionHead>,
}

impl InterpBranch {
    pub fn new(store: &mut ParamStore, name: &str, config: &InterpConfig) -> Result<Self> {
        let mut b = InterpBranch::features_only(store, name, config)?;
        let c = &config.branch;
        b.fusion = Some(Fusion::new(store, &scoped(name, "fusion"), 2, c.width, c.fusion_blocks));
        b.recon = Some(ReconstructionHead::new(store, &scoped(name, "recon"), c.width, c.recon_blocks));
        Ok(b)
    }

    /// Extraction and directional synthesis only, for early fusion.
    pub fn features_only(store: &mut ParamStore, name: &str, config: &InterpConfig) -> Result<Self> {
        let c = &config.branch;
        c.validate()?;
        let inputs = if config.four_frame { 4 } else { 3 };
        Ok(InterpBranch {
            config: config.clone(),
            extractor: FeatureExtractor::new(store, &scoped(name, "extract"), c.width, c.extractor_blocks),
            forward: PyramidAligner::new(store, &scoped(name, "forward"), c, inputs)?,
            backward: PyramidAligner::new(store, &scoped(name, "backward"), c, inputs)?,
            fusion: None,
            recon: None,
        })
    }

    pub fn config(&self) -> &InterpConfig {
        &self.config
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.forward.uses_heatmaps()
    }

    pub fn size_multiple(&self) -> usize {
        self.config.branch.size_multiple()
    }

    pub fn triple(&self, direction: Direction) -> InterpTriple {
        InterpTriple::new(direction, self.config.four_frame)
    }

    pub fn pyramid(&self, g: &mut Graph<'_>, frame: Var) -> PyramidVars {
        self.extractor.forward(g, frame)
    }

    /// Synthesised level-1 feature for one direction. `pyramids` and
    /// `heatmaps` are indexed like the four neighbours.
    pub fn directional(&self, g: &mut Graph<'_>, direction: Direction, pyramids: &[PyramidVars; 4], heatmaps: Option<&[Var; 4]>) -> Var {
        let triple = self.triple(direction);
        let pyr: Vec<PyramidVars> = triple.frames.iter().map(|&i| pyramids[i]).collect();
        let hm: Option<Vec<Var>> = heatmaps.map(|h| triple.frames.iter().map(|&i| h[i]).collect());
        let aligner = match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        };
        aligner.forward(g, &pyr, InterpTriple::SOURCE, hm.as_deref()).aligned
    }

    /// `neighbors` are `[t-2, t-1, t+1, t+2]`, each `(B, 3, H, W)`.
    pub fn forward(&self, g: &mut Graph<'_>, neighbors: &[Var; 4], heatmaps: Option<&[Var; 4]>) -> InterpVars {
        let pyramids: [PyramidVars; 4] = std::array::from_fn(|i| self.pyramid(g, neighbors[i]));
        let directional = [
            self.directional(g, Direction::Forward, &pyramids, heatmaps),
            self.directional(g, Direction::Backward, &pyramids, heatmaps),
        ];
        let (Some(fusion), Some(recon)) = (&self.fusion, &self.recon) else {
            return InterpVars { directional, fused: None, output: None };
        };
        let fused = fusion.forward(g, &directional);
        let residual = recon.forward(g, fused);
        // The base is the mean of the two adjacent neighbours, not the target.
        let pair = g.add(neighbors[1], neighbors[2]);
        let base = g.scale(pair, 0.5);
        let output = g.add(residual, base);
        InterpVars { directional, fused: Some(fused), output: Some(output) }
    }

    fn check_heatmap_presence(&self, present: bool) -> Result<()> {
        match (present, self.uses_heatmaps()) {
            (true, false) => Err(Error::config("heatmaps given to an interpolation branch configured without them")),
            (false, true) => Err(Error::config("interpolation branch needs heatmaps")),
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

    /// Validated single-direction synthesis. `pyramids` and `heatmaps` follow
    /// `triple.frames` order.
    pub fn interp_one_direction(
        &self,
        store: &ParamStore,
        triple: &InterpTriple,
        pyramids: &[FeaturePyramid],
        heatmaps: Option<&[HeatmapStack]>,
    ) -> Result<FeatureMap> {
        let expected = self.triple(triple.direction);
        if *triple != expected {
            return Err(Error::invalid(format!(
                "{:?} interpolation expects neighbour order {:?}, got {:?}",
                triple.direction, expected.frames, triple.frames
            )));
        }
        let n = triple.frames.len();
        if pyramids.len() != n {
            return Err(Error::invalid(format!("expected {n} pyramids, got {}", pyramids.len())));
        }
        let finest: Vec<FeatureMap> = pyramids.iter().map(|p| p.level(1).clone()).collect();
        check_maps(&finest, n, self.config.branch.width)?;
        let (h, w) = (finest[0].height(), finest[0].width());
        check_frame_size(h, w, self.size_multiple())?;
        self.check_heatmap_presence(heatmaps.is_some())?;
        if let Some(hm) = heatmaps {
            if hm.len() != n {
                return Err(Error::invalid(format!("expected {n} heatmap stacks, got {}", hm.len())));
            }
            hm.iter().try_for_each(|s| check_heatmap(s, self.config.branch.landmarks, h, w))?;
        }
        let mut g = Graph::with_params(store);
        let pyr: Vec<PyramidVars> = pyramids.iter().map(|p| p.to_vars(&mut g)).collect();
        let hm: Option<Vec<Var>> = heatmaps.map(|h| h.iter().map(|s| g.constant(s.tensor().clone())).collect());
        let aligner = match triple.direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        };
        let out = aligner.forward(&mut g, &pyr, InterpTriple::SOURCE, hm.as_deref()).aligned;
        FeatureMap::new(g.value(out).clone())
    }

    /// `I^in` from the four neighbours `[t-2, t-1, t+1, t+2]`, clamped to `[0, 1]`.
    pub fn interpolate(&self, store: &ParamStore, neighbors: &[Frame; 4], heatmaps: Option<&[HeatmapStack]>) -> Result<Frame> {
        let (Some(_), Some(_)) = (&self.fusion, &self.recon) else {
            return Err(Error::config("interpolation branch was built without fusion and reconstruction"));
        };
        let (h, w) = (neighbors[0].height(), neighbors[0].width());
        if neighbors.iter().any(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::invalid("neighbour frames differ in size"));
        }
        check_frame_size(h, w, self.size_multiple())?;
        self.check_heatmap_presence(heatmaps.is_some())?;
        if let Some(hm) = heatmaps {
            if hm.len() != 4 {
                return Err(Error::invalid(format!("expected 4 heatmap stacks, got {}", hm.len())));
            }
            hm.iter().try_for_each(|s| check_heatmap(s, self.config.branch.landmarks, h, w))?;
        }
        let mut g = Graph::with_params(store);
        let nb: [Var; 4] = std::array::from_fn(|i| g.constant(neighbors[i].tensor().clone()));
        let hm: Option<[Var; 4]> = heatmaps.map(|h| std::array::from_fn(|i| g.constant(h[i].tensor().clone())));
        let out = self.forward(&mut g, &nb, hm.as_ref()).output.expect("head present");
        Frame::from_clamped(g.value(out))
    }

    /// [`InterpBranch::interpolate`] on a window; the centre frame and its
    /// heatmaps are never read.
    pub fn interpolate_window(&self, store: &ParamStore, window: &FrameWindow, heatmaps: Option<&[HeatmapStack]>) -> Result<Frame> {
        let neighbors = NEIGHBOR_WINDOW_INDEX.map(|i| window.frames[i].clone());
        let hm: Option<Vec<HeatmapStack>> = match heatmaps {
            Some(h) if h.len() != FrameWindow::LEN => {
                return Err(Error::invalid(format!("expected {} heatmap stacks, got {}", FrameWindow::LEN, h.len())))
            }
            Some(h) => Some(NEIGHBOR_WINDOW_INDEX.iter().map(|&i| h[i].clone()).collect()),
            None => None,
        };
        self.interpolate(store, &neighbors, hm.as_deref())
    }
}
