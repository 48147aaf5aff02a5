//! Face-aware offset calculation.
//!
//! A small encoder-decoder maps concatenated frame features (plus, optionally,
//! landmark heatmaps and a coarser offset estimate) to a deformable-convolution
//! offset field. The last layer is zero-initialised, so a fresh module emits
//! zero offsets and a modulation of exactly 0.5.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::face_prior::HeatmapStack;
use crate::nn::{scoped, Conv2d, Init, ParamStore};
use crate::ops::{FeatureMap, OffsetField};

pub const TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocConfig {
    /// Total channels of the concatenated feature inputs.
    pub feature_channels: usize,
    /// Total channels of the concatenated heatmaps, used when `use_heatmaps`.
    pub heatmap_channels: usize,
    pub use_heatmaps: bool,
    /// Whether a coarser offset estimate (2K channels) is fed in.
    pub prior: bool,
    pub base_width: usize,
    pub depth: usize,
    pub taps: usize,
}

impl FocConfig {
    pub fn new(feature_channels: usize, base_width: usize) -> Self {
        FocConfig {
            feature_channels,
            heatmap_channels: 0,
            use_heatmaps: false,
            prior: false,
            base_width,
            depth: 2,
            taps: TAPS,
        }
    }

    pub fn with_heatmaps(mut self, channels: usize) -> Self {
        self.use_heatmaps = true;
        self.heatmap_channels = channels;
        self
    }

    pub fn with_prior(mut self, prior: bool) -> Self {
        self.prior = prior;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.feature_channels
            + if self.prior { 2 * self.taps } else { 0 }
            + if self.use_heatmaps { self.heatmap_channels } else { 0 }
    }

    pub fn out_channels(&self) -> usize {
        3 * self.taps
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("FOC depth must be at least 1"));
        }
        if self.base_width == 0 || self.feature_channels == 0 {
            return Err(Error::config("FOC widths must be positive"));
        }
        if self.use_heatmaps && self.heatmap_channels == 0 {
            return Err(Error::config("FOC uses heatmaps but has zero heatmap channels"));
        }
        Ok(())
    }
}

/// Offsets and sigmoid modulation produced inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct OffsetVars {
    pub offsets: Var,
    pub mask: Var,
}

fn split_head(g: &mut Graph<'_>, head: Var, taps: usize) -> OffsetVars {
    let offsets = g.narrow(head, 0, 2 * taps);
    let logits = g.narrow(head, 2 * taps, taps);
    let mask = g.sigmoid(logits);
    OffsetVars { offsets, mask }
}

#[derive(Clone, Debug)]
pub struct Foc {
    config: FocConfig,
    input: Conv2d,
    heatmap_input: Option<Conv2d>,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

impl Foc {
    pub fn new(store: &mut ParamStore, name: &str, config: FocConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_width;
        let widths: Vec<usize> = (0..=config.depth).map(|i| b << i.min(2)).collect();
        let plain_in = config.in_channels() - if config.use_heatmaps { config.heatmap_channels } else { 0 };
        let input = Conv2d::new(store, &scoped(name, "in"), plain_in, b, 3, 1, Init::DEFAULT);
        // Heatmap weights start at zero so a heatmap-aware module begins as
        // its heatmap-free counterpart with the same seed.
        let heatmap_input = config
            .use_heatmaps
            .then(|| Conv2d::new(store, &scoped(name, "in_heatmap"), config.heatmap_channels, b, 3, 1, Init::Zeros));
        let down = (1..=config.depth)
            .map(|i| Conv2d::new(store, &scoped(name, &format!("down{i}")), widths[i - 1], widths[i], 3, 2, Init::DEFAULT))
            .collect();
        let up = (1..=config.depth)
            .map(|i| {
                Conv2d::new(
                    store,
                    &scoped(name, &format!("up{i}")),
                    widths[i] + widths[i - 1],
                    widths[i - 1],
                    3,
                    1,
                    Init::DEFAULT,
                )
            })
            .collect();
        let head = Conv2d::new(store, &scoped(name, "head"), b, config.out_channels(), 3, 1, Init::Zeros);
        Ok(Foc { config, input, heatmap_input, down, up, head })
    }

    /// The reduced, landmark-free variant used for coarse levels and the
    /// cascade refinement.
    pub fn simplified(store: &mut ParamStore, name: &str, feature_channels: usize, prior: bool, base_width: usize) -> Result<Self> {
        Foc::new(store, name, FocConfig::new(feature_channels, base_width).with_prior(prior))
    }

    pub fn config(&self) -> &FocConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph<'_>, features: &[Var], heatmaps: Option<&[Var]>, prior: Option<Var>) -> OffsetVars {
        let c = &self.config;
        assert_eq!(heatmaps.is_some(), c.use_heatmaps, "heatmap presence must match FOC config");
        assert_eq!(prior.is_some(), c.prior, "prior presence must match FOC config");
        let mut parts = features.to_vec();
        parts.extend(prior);
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
        let mut h = self.input.forward(g, x);
        if let (Some(conv), Some(hm)) = (&self.heatmap_input, heatmaps) {
            let hx = if hm.len() == 1 { hm[0] } else { g.concat(hm) };
            let hh = conv.forward(g, hx);
            h = g.add(h, hh);
        }
        let mut skips = vec![g.silu(h)];
        for conv in &self.down {
            let prev = *skips.last().expect("non-empty");
            let d = conv.forward(g, prev);
            skips.push(g.silu(d));
        }
        let mut d = skips.pop().expect("depth >= 1");
        for conv in self.up.iter().rev() {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample2x(d);
            let cat = g.concat(&[u, skip]);
            let y = conv.forward(g, cat);
            d = g.silu(y);
        }
        let head = self.head.forward(g, d);
        split_head(g, head, c.taps)
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Spatial sizes must survive `depth` halvings.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << self.config.depth;
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "FOC of depth {} needs sizes divisible by {f}, got {h}x{w}",
                self.config.depth
            )));
        }
        Ok(())
    }
}

/// The two-convolution offset estimator FOC replaces.
#[derive(Clone, Debug)]
pub struct PlainOffsets {
    conv: Conv2d,
    head: Conv2d,
    taps: usize,
    prior: bool,
}

impl PlainOffsets {
    pub fn new(store: &mut ParamStore, name: &str, feature_channels: usize, prior: bool, width: usize) -> Self {
        let in_c = feature_channels + if prior { 2 * TAPS } else { 0 };
        PlainOffsets {
            conv: Conv2d::new(store, &scoped(name, "conv"), in_c, width, 3, 1, Init::DEFAULT),
            head: Conv2d::new(store, &scoped(name, "head"), width, 3 * TAPS, 3, 1, Init::Zeros),
            taps: TAPS,
            prior,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, features: &[Var], prior: Option<Var>) -> OffsetVars {
        assert_eq!(prior.is_some(), self.prior, "prior presence must match estimator");
        let mut parts = features.to_vec();
        parts.extend(prior);
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
        let h = self.conv.forward(g, x);
        let h = g.silu(h);
        let head = self.head.forward(g, h);
        split_head(g, head, self.taps)
    }
}

/// Either a FOC module or the plain two-convolution baseline.
#[derive(Clone, Debug)]
pub enum OffsetEstimator {
    Foc(Foc),
    Plain(PlainOffsets),
}

impl OffsetEstimator {
    pub fn uses_heatmaps(&self) -> bool {
        matches!(self, OffsetEstimator::Foc(f) if f.config.use_heatmaps)
    }

    pub fn forward(&self, g: &mut Graph<'_>, features: &[Var], heatmaps: Option<&[Var]>, prior: Option<Var>) -> OffsetVars {
        match self {
            OffsetEstimator::Foc(f) => f.forward(g, features, heatmaps, prior),
            OffsetEstimator::Plain(p) => p.forward(g, features, prior),
        }
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        match self {
            OffsetEstimator::Foc(f) => f.check_spatial(h, w),
            OffsetEstimator::Plain(_) => Ok(()),
        }
    }
}

/// Runs a FOC module on validated single-sample inputs.
pub fn foc_forward(
    foc: &Foc,
    store: &ParamStore,
    features: &[FeatureMap],
    heatmaps: Option<&[HeatmapStack]>,
    prior: Option<&OffsetField>,
) -> Result<OffsetField> {
    let c = foc.config();
    let first = features.first().ok_or_else(|| Error::invalid("FOC needs at least one feature map"))?;
    let (h, w) = (first.height(), first.width());
    let same = |fh: usize, fw: usize| (fh, fw) == (h, w);
    if features.iter().any(|f| !same(f.height(), f.width())) {
        return Err(Error::invalid("FOC feature maps differ in size"));
    }
    let feature_channels: usize = features.iter().map(FeatureMap::channels).sum();
    if feature_channels != c.feature_channels {
        return Err(Error::invalid(format!(
            "FOC expects {} feature channels, got {feature_channels}",
            c.feature_channels
        )));
    }
    match (heatmaps, c.use_heatmaps) {
        (Some(_), false) => return Err(Error::config("heatmaps given to a FOC configured without them")),
        (None, true) => return Err(Error::config("FOC configured with heatmaps but none given")),
        _ => {}
    }
    if let Some(hm) = heatmaps {
        if hm.iter().any(|s| !same(s.height(), s.width())) {
            return Err(Error::invalid("heatmaps differ in size from features"));
        }
        let channels: usize = hm.iter().map(HeatmapStack::landmarks).sum();
        if channels != c.heatmap_channels {
            return Err(Error::invalid(format!("FOC expects {} heatmap channels, got {channels}", c.heatmap_channels)));
        }
    }
    if prior.is_some() != c.prior {
        return Err(Error::config("prior offsets presence does not match FOC config"));
    }
    if let Some(p) = prior {
        if !same(p.height(), p.width()) || p.taps() != c.taps {
            return Err(Error::invalid("prior offsets do not match feature size or taps"));
        }
    }
    foc.check_spatial(h, w)?;

    let mut g = Graph::with_params(store);
    let fv: Vec<Var> = features.iter().map(|f| g.constant(f.tensor().clone())).collect();
    let hv: Option<Vec<Var>> = heatmaps.map(|hm| hm.iter().map(|s| g.constant(s.tensor().clone())).collect());
    let pv = prior.map(|p| g.constant(p.offsets().clone()));
    let out = foc.forward(&mut g, &fv, hv.as_deref(), pv);
    OffsetField::new(g.value(out.offsets).clone(), g.value(out.mask).clone())
}
