//! Differentiable building blocks with a validated, single-sample API:
//! bilinear sampling, plain and modulated deformable convolution, and a
//! central-difference gradient checker.
//!
//! Offsets are stored as `K` consecutive `(dy, dx)` channel pairs in
//! [`ConvKernel::tap_grid`] order, in pixels at the feature map's resolution.
//! Samples that fall outside the map read zeros.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

/// A single `(channels, height, width)` feature map with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(format!("feature map needs shape (1, C>0, H>0, W>0), got {s}")));
        }
        if !t.all_finite() {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap(t))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        FeatureMap::new(Tensor::from_vec(Shape::new(1, channels, height, width), data)?)
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        FeatureMap::new(Tensor::from_fn(Shape::new(1, channels, height, width), |_, c, y, x| f(c, y, x)))
    }

    pub fn channels(&self) -> usize {
        self.0.shape().c
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at(0, c, y, x)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Convolution weights `(out, in, k, k)` with odd `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be square with odd size, got {s}")));
        }
        if !weights.all_finite() {
            return Err(Error::invalid("kernel contains non-finite weights"));
        }
        Ok(ConvKernel { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.shape().h
    }

    pub fn taps(&self) -> usize {
        self.size() * self.size()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Fixed tap displacements `(dy, dx)`, row-major from `(-k/2, -k/2)`.
    pub fn tap_grid(&self) -> Vec<(isize, isize)> {
        tap_grid(self.size())
    }
}

pub fn tap_grid(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    (0..k * k).map(|t| ((t / k) as isize - r, (t % k) as isize - r)).collect()
}

/// Per-position offsets and modulation for a `K`-tap deformable kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    offsets: Tensor,
    modulation: Tensor,
}

impl OffsetField {
    pub fn new(offsets: Tensor, modulation: Tensor) -> Result<Self> {
        let o = offsets.shape();
        let m = modulation.shape();
        if o.n != 1 || m.n != 1 || o.c != 2 * m.c || (o.h, o.w) != (m.h, m.w) {
            return Err(Error::invalid(format!(
                "offset field needs offsets (1, 2K, H, W) and modulation (1, K, H, W), got {o} and {m}"
            )));
        }
        if !offsets.all_finite() {
            return Err(Error::invalid("offsets contain non-finite values"));
        }
        if modulation.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("modulation must lie in [0, 1]"));
        }
        Ok(OffsetField { offsets, modulation })
    }

    /// Constant displacement `(dy, dx)` for every tap and position.
    pub fn constant(taps: usize, height: usize, width: usize, dy: f64, dx: f64, modulation: f64) -> Result<Self> {
        let offsets = Tensor::from_fn(Shape::new(1, 2 * taps, height, width), |_, c, _, _| {
            if c % 2 == 0 {
                dy
            } else {
                dx
            }
        });
        OffsetField::new(offsets, Tensor::full(Shape::new(1, taps, height, width), modulation))
    }

    /// Zero offsets and unit modulation: deformable convolution reduces to
    /// plain convolution.
    pub fn identity(taps: usize, height: usize, width: usize) -> Self {
        OffsetField::constant(taps, height, width, 0.0, 0.0, 1.0).expect("valid by construction")
    }

    pub fn taps(&self) -> usize {
        self.modulation.shape().c
    }

    pub fn height(&self) -> usize {
        self.modulation.shape().h
    }

    pub fn width(&self) -> usize {
        self.modulation.shape().w
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn modulation(&self) -> &Tensor {
        &self.modulation
    }

    /// `(dy, dx)` of tap `t` at `(y, x)`.
    pub fn offset(&self, t: usize, y: usize, x: usize) -> (f64, f64) {
        (self.offsets.at(0, 2 * t, y, x), self.offsets.at(0, 2 * t + 1, y, x))
    }
}

/// Bilinear read of `channel` at fractional `(y, x)`.
pub fn bilinear_sample(feature: &FeatureMap, y: f64, x: f64, channel: usize) -> Result<f64> {
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::invalid(format!("sample coordinate ({y}, {x}) is not finite")));
    }
    if channel >= feature.channels() {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {} channels",
            feature.channels()
        )));
    }
    let plane = feature.tensor().plane(0, channel);
    Ok(kernels::bilinear(plane, feature.height(), feature.width(), y, x))
}

/// Plain stride-1 convolution with zero padding `k/2`.
pub fn conv2d(feature: &FeatureMap, kernel: &ConvKernel) -> Result<FeatureMap> {
    if kernel.in_channels() != feature.channels() {
        return Err(Error::invalid(format!(
            "kernel expects {} input channels, feature has {}",
            kernel.in_channels(),
            feature.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(feature.tensor().clone());
    let w = g.constant(kernel.weights().clone());
    let y = g.conv2d(x, w, None, 1, kernel.size() / 2);
    FeatureMap::new(g.value(y).clone())
}

/// Modulated deformable convolution:
/// `out(p) = Σ_k w_k · F(p + p_k + Δp_k) · Δm_k`.
pub fn deform_conv(feature: &FeatureMap, kernel: &ConvKernel, field: &OffsetField) -> Result<FeatureMap> {
    if kernel.in_channels() != feature.channels() {
        return Err(Error::invalid(format!(
            "kernel expects {} input channels, feature has {}",
            kernel.in_channels(),
            feature.channels()
        )));
    }
    if (field.height(), field.width()) != (feature.height(), feature.width()) {
        return Err(Error::invalid(format!(
            "offset field is {}x{}, feature is {}x{}",
            field.height(),
            field.width(),
            feature.height(),
            feature.width()
        )));
    }
    if field.taps() != kernel.taps() {
        return Err(Error::invalid(format!(
            "offset field has {} taps, kernel has {}",
            field.taps(),
            kernel.taps()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(feature.tensor().clone());
    let w = g.constant(kernel.weights().clone());
    let o = g.constant(field.offsets().clone());
    let m = g.constant(field.modulation().clone());
    let y = g.deform_conv(x, w, None, o, m);
    FeatureMap::new(g.value(y).clone())
}

/// Outcome of comparing analytic and central-difference gradients for one
/// input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }
}

/// What a gradient check perturbs.
pub struct GradcheckInputs<'a> {
    pub tensors: Vec<(String, Tensor)>,
    pub store: Option<&'a ParamStore>,
    pub params: Vec<String>,
}

impl<'a> GradcheckInputs<'a> {
    pub fn tensors(tensors: Vec<(String, Tensor)>) -> Self {
        GradcheckInputs { tensors, store: None, params: Vec::new() }
    }

    pub fn with_params(mut self, store: &'a ParamStore, params: impl IntoIterator<Item = String>) -> Self {
        self.store = Some(store);
        self.params = params.into_iter().collect();
        self
    }
}

/// Checks the gradient of `f` against central differences.
///
/// `f` receives a graph and one variable per entry of `inputs.tensors`; its
/// output is reduced to a scalar by a fixed pseudo-random weighted sum so that
/// every output element contributes.
pub fn gradcheck<F>(inputs: &GradcheckInputs<'_>, step: f64, tolerance: f64, f: F) -> GradcheckReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let empty = ParamStore::new(0);
    let store = inputs.store.unwrap_or(&empty);

    let eval = |store: &ParamStore, tensors: &[Tensor]| -> f64 {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let r = reduction_weights(g.shape(out));
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let r = g.constant(reduction_weights(g.shape(out)));
    let weighted = g.mul(out, r);
    let root = g.sum(weighted);
    let grads = g.backward(root);
    let param_grads = grads.params(&g);

    let base: Vec<Tensor> = inputs.tensors.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::new();
    for (i, (name, t)) in inputs.tensors.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut numeric = Tensor::zeros(t.shape());
        let mut perturbed = base.clone();
        for j in 0..t.numel() {
            let orig = t.data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let fp = eval(store, &perturbed);
            perturbed[i].data_mut()[j] = orig - step;
            let fm = eval(store, &perturbed);
            perturbed[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (fp - fm) / (2.0 * step);
        }
        entries.push(entry(name, &analytic, &numeric));
    }
    for name in &inputs.params {
        let t = store.get(name).unwrap_or_else(|| panic!("gradcheck: unknown parameter {name}"));
        let analytic = param_grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut numeric = Tensor::zeros(t.shape());
        let mut local = store.clone();
        for j in 0..t.numel() {
            let orig = t.data()[j];
            local.get_mut(name).expect("present").data_mut()[j] = orig + step;
            let fp = eval(&local, &base);
            local.get_mut(name).expect("present").data_mut()[j] = orig - step;
            let fm = eval(&local, &base);
            local.get_mut(name).expect("present").data_mut()[j] = orig;
            numeric.data_mut()[j] = (fp - fm) / (2.0 * step);
        }
        entries.push(entry(name, &analytic, &numeric));
    }
    GradcheckReport { step, tolerance, entries }
}

fn entry(name: &str, analytic: &Tensor, numeric: &Tensor) -> GradcheckEntry {
    let max_abs_error = analytic.max_abs_diff(numeric);
    let scale = analytic.max_abs().max(numeric.max_abs());
    let max_rel_error = if scale > 0.0 { max_abs_error / scale } else { 0.0 };
    GradcheckEntry { name: name.to_string(), elements: analytic.numel(), max_abs_error, max_rel_error }
}

fn reduction_weights(shape: Shape) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let data = (0..shape.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    Tensor::from_vec(shape, data).expect("sized for shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_kernel(o: usize, c: usize, seed: u64) -> ConvKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvKernel::new(Tensor::from_fn(Shape::new(o, c, 3, 3), |_, _, _, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn bilinear_midpoint() {
        let f = FeatureMap::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&f, 0.0, 0.5, 0).unwrap(), 0.5);
    }

    #[test]
    fn bilinear_grid_node_is_exact() {
        let f = random_map(2, 4, 5, 1);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(bilinear_sample(&f, y as f64, x as f64, 1).unwrap(), f.at(1, y, x));
            }
        }
    }

    #[test]
    fn bilinear_outside_support_is_zero() {
        let f = FeatureMap::from_vec(1, 1, 1, vec![5.0]).unwrap();
        assert_eq!(bilinear_sample(&f, 0.0, 1.0, 0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&f, -3.0, 0.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_rejects_non_finite() {
        let f = random_map(1, 2, 2, 0);
        let err = bilinear_sample(&f, f64::NAN, 0.0, 0).unwrap_err();
        assert_eq!(err.category(), "invalid-argument");
        assert!(bilinear_sample(&f, 0.0, f64::INFINITY, 0).is_err());
    }

    #[test]
    fn tap_grid_is_row_major() {
        let g = tap_grid(3);
        assert_eq!(g[0], (-1, -1));
        assert_eq!(g[1], (-1, 0));
        assert_eq!(g[4], (0, 0));
        assert_eq!(g[8], (1, 1));
    }

    #[test]
    fn box_filter_of_ones() {
        let f = FeatureMap::from_vec(1, 3, 3, vec![1.0; 9]).unwrap();
        let k = ConvKernel::new(Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0)).unwrap();
        let out = deform_conv(&f, &k, &OffsetField::identity(9, 3, 3)).unwrap();
        assert!((out.at(0, 1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deform_rejects_mismatched_field() {
        let f = random_map(2, 4, 4, 0);
        let k = random_kernel(1, 2, 1);
        let err = deform_conv(&f, &k, &OffsetField::identity(9, 4, 5)).unwrap_err();
        assert_eq!(err.category(), "invalid-argument");
        let k3 = random_kernel(1, 3, 1);
        assert!(deform_conv(&f, &k3, &OffsetField::identity(9, 4, 4)).is_err());
    }

    #[test]
    fn modulation_out_of_range_rejected() {
        let o = Tensor::zeros(Shape::new(1, 18, 2, 2));
        let m = Tensor::full(Shape::new(1, 9, 2, 2), 1.5);
        assert!(OffsetField::new(o, m).is_err());
    }

    #[test]
    fn modulation_scales_a_single_tap_linearly() {
        let f = random_map(1, 5, 5, 3);
        // Keep only the centre-right tap.
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 2, 0.7);
        let k = ConvKernel::new(w).unwrap();
        let base = deform_conv(&f, &k, &OffsetField::constant(9, 5, 5, 0.3, -0.2, 1.0).unwrap()).unwrap();
        let half = deform_conv(&f, &k, &OffsetField::constant(9, 5, 5, 0.3, -0.2, 0.4).unwrap()).unwrap();
        for (a, b) in base.tensor().data().iter().zip(half.tensor().data()) {
            assert!((0.4 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradcheck_bilinear_sample() {
        // Sample a 1-channel map at a fractional point through the deformable
        // path with a single live tap, checking d/d(feature) and d/d(offset).
        let f = random_map(1, 3, 3, 11);
        let mut offsets = Tensor::zeros(Shape::new(1, 18, 3, 3));
        offsets.data_mut().iter_mut().for_each(|v| *v = 0.37);
        let inputs = GradcheckInputs::tensors(vec![
            ("feature".into(), f.tensor().clone()),
            ("offsets".into(), offsets),
        ]);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let report = gradcheck(&inputs, 1e-4, 1e-5, |g, v| {
            let w = g.constant(w.clone());
            let m = g.constant(Tensor::full(Shape::new(1, 9, 3, 3), 1.0));
            g.deform_conv(v[0], w, None, v[1], m)
        });
        assert!(report.passed(), "{report:?}");
    }
}
