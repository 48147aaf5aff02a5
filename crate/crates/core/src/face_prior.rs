//! Facial landmark heatmaps.
//!
//! Landmarks are `(x, y)` pixel coordinates where integer values sit on pixel
//! centres. Heatmaps are unit-peak Gaussians, one channel per landmark.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::tensor::{Shape, Tensor};

/// Number of landmarks in the standard 68-point face layout.
pub const DEFAULT_LANDMARKS: usize = 68;
/// Heatmap spread at full resolution, in pixels.
pub const DEFAULT_SIGMA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("landmark set is empty"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(LandmarkSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// `(1, L, H, W)` heatmaps with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack(Tensor);

impl HeatmapStack {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().n != 1 {
            return Err(Error::invalid("heatmap stack must hold a single sample"));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heatmap values must lie in [0, 1]"));
        }
        Ok(HeatmapStack(t))
    }

    pub fn landmarks(&self) -> usize {
        self.0.shape().c
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Row-major `(y, x)` of the first maximum of channel `l`.
    pub fn argmax(&self, l: usize) -> (usize, usize) {
        let plane = self.0.plane(0, l);
        let (i, _) = plane
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        (i / self.width(), i % self.width())
    }
}

/// One Gaussian per landmark, evaluated at pixel centres:
/// `exp(-((x - x_l)^2 + (y - y_l)^2) / (2 sigma^2))`.
pub fn render_heatmaps(landmarks: &LandmarkSet, height: usize, width: usize, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("heatmap size must be non-zero"));
    }
    let denom = 2.0 * sigma * sigma;
    let pts = landmarks.points();
    let t = Tensor::from_fn(Shape::new(1, pts.len(), height, width), |_, l, y, x| {
        let (lx, ly) = pts[l];
        let d2 = (x as f64 - lx).powi(2) + (y as f64 - ly).powi(2);
        (-d2 / denom).exp()
    });
    HeatmapStack::new(t)
}

/// Area-average downsampling by `factor`, then each channel is rescaled so its
/// maximum equals the maximum it had before downsampling.
pub fn downscale_heatmaps(stack: &HeatmapStack, factor: usize) -> Result<HeatmapStack> {
    if ![1, 2, 4].contains(&factor) {
        return Err(Error::invalid(format!("heatmap downscale factor must be 1, 2 or 4, got {factor}")));
    }
    let (h, w) = (stack.height(), stack.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("{h}x{w} heatmaps are not divisible by {factor}")));
    }
    if factor == 1 {
        return Ok(stack.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let src = stack.tensor();
    let mut out = Tensor::from_fn(Shape::new(1, stack.landmarks(), oh, ow), |_, l, y, x| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += src.at(0, l, y * factor + dy, x * factor + dx);
            }
        }
        acc / area
    });
    let p = oh * ow;
    for l in 0..stack.landmarks() {
        let before = src.plane(0, l).iter().fold(0.0_f64, |m, &v| m.max(v));
        let plane = &mut out.data_mut()[l * p..(l + 1) * p];
        let after = plane.iter().fold(0.0_f64, |m, &v| m.max(v));
        if after > 0.0 {
            let scale = before / after;
            plane.iter_mut().for_each(|v| *v = (*v * scale).min(1.0));
        }
    }
    HeatmapStack::new(out)
}

/// Source of landmarks for a frame. Real detectors plug in here; the default
/// implementation looks them up from precomputed records.
pub trait LandmarkDetector {
    fn detect(&self, frame_id: &str, frame: &Frame) -> Result<LandmarkSet>;
}

/// Landmarks keyed by frame id, typically parsed from a sidecar file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedLandmarks {
    records: HashMap<String, LandmarkSet>,
}

impl PrecomputedLandmarks {
    pub fn new() -> Self {
        PrecomputedLandmarks::default()
    }

    pub fn insert(&mut self, frame_id: impl Into<String>, landmarks: LandmarkSet) {
        self.records.insert(frame_id.into(), landmarks);
    }

    pub fn get(&self, frame_id: &str) -> Option<&LandmarkSet> {
        self.records.get(frame_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses the sidecar text format: one line per frame, the frame id
    /// followed by `count` whitespace-separated `x y` pairs. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str, count: usize) -> Result<Self> {
        let mut out = PrecomputedLandmarks::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().expect("non-empty line has a field");
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("landmark line {}: {e}", lineno + 1)))?;
            if values.len() != 2 * count {
                return Err(Error::Data(format!(
                    "landmark line {}: expected {} coordinates, found {}",
                    lineno + 1,
                    2 * count,
                    values.len()
                )));
            }
            let points = values.chunks(2).map(|p| (p[0], p[1])).collect();
            out.insert(id, LandmarkSet::new(points)?);
        }
        Ok(out)
    }

    /// Inverse of [`PrecomputedLandmarks::parse`], sorted by frame id.
    pub fn format(&self) -> String {
        let mut ids: Vec<&String> = self.records.keys().collect();
        ids.sort();
        let mut s = String::new();
        for id in ids {
            s.push_str(id);
            for (x, y) in self.records[id].points() {
                s.push_str(&format!(" {x} {y}"));
            }
            s.push('\n');
        }
        s
    }
}

impl LandmarkDetector for PrecomputedLandmarks {
    fn detect(&self, frame_id: &str, _frame: &Frame) -> Result<LandmarkSet> {
        self.records
            .get(frame_id)
            .cloned()
            .ok_or_else(|| Error::DataMissing { frame: frame_id.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::new(vec![(x, y)]).unwrap()
    }

    #[test]
    fn gaussian_peak_and_shoulder() {
        let hm = render_heatmaps(&one(4.0, 4.0), 9, 9, 2.0).unwrap();
        assert_eq!(hm.tensor().at(0, 0, 4, 4), 1.0);
        let v = hm.tensor().at(0, 0, 4, 6);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn far_landmark_vanishes() {
        let hm = render_heatmaps(&one(-100.0, -100.0), 9, 9, 2.0).unwrap();
        assert!(hm.tensor().data().iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(render_heatmaps(&one(1.0, 1.0), 4, 4, 0.0).is_err());
        assert!(render_heatmaps(&one(1.0, 1.0), 4, 4, -1.0).is_err());
    }

    #[test]
    fn channels_follow_landmark_order() {
        let a = LandmarkSet::new(vec![(1.0, 2.0), (5.0, 3.0)]).unwrap();
        let b = LandmarkSet::new(vec![(5.0, 3.0), (1.0, 2.0)]).unwrap();
        let ha = render_heatmaps(&a, 8, 8, 1.5).unwrap();
        let hb = render_heatmaps(&b, 8, 8, 1.5).unwrap();
        assert_eq!(ha.tensor().plane(0, 0), hb.tensor().plane(0, 1));
        assert_eq!(ha.tensor().plane(0, 1), hb.tensor().plane(0, 0));
        assert_eq!(ha.argmax(1), (3, 5));
    }

    #[test]
    fn downscale_identity_and_constants() {
        let hm = render_heatmaps(&one(3.0, 2.0), 8, 8, 2.0).unwrap();
        assert_eq!(downscale_heatmaps(&hm, 1).unwrap(), hm);
        let c = HeatmapStack::new(Tensor::full(Shape::new(1, 2, 8, 8), 0.25)).unwrap();
        let d = downscale_heatmaps(&c, 2).unwrap();
        assert_eq!(d.height(), 4);
        assert!(d.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downscale_rejects_bad_factor() {
        let hm = render_heatmaps(&one(3.0, 2.0), 6, 6, 2.0).unwrap();
        assert!(downscale_heatmaps(&hm, 3).is_err());
        assert!(downscale_heatmaps(&hm, 4).is_err());
    }

    #[test]
    fn sidecar_round_trip_and_missing_frame() {
        let mut lm = PrecomputedLandmarks::new();
        lm.insert("000001", LandmarkSet::new(vec![(1.5, 2.0), (3.0, -4.25)]).unwrap());
        let text = lm.format();
        let back = PrecomputedLandmarks::parse(&text, 2).unwrap();
        assert_eq!(back, lm);
        let frame = Frame::filled(4, 4, 0.0).unwrap();
        assert_eq!(back.detect("000001", &frame).unwrap().len(), 2);
        let err = back.detect("000002", &frame).unwrap_err();
        assert_eq!(err.category(), "data-missing");
        assert!(err.to_string().contains("000002"));
    }

    #[test]
    fn sidecar_wrong_arity_rejected() {
        assert!(PrecomputedLandmarks::parse("f 1 2 3", 2).is_err());
    }
}
