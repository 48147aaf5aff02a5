//! Central-difference gradient checks of the main differentiable operations
//! on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combiner::Combiner;
use crate::foc::{Foc, FocConfig};
use crate::losses::branch_loss_var;
use crate::model::CombinerConfig;
use crate::nn::ParamStore;
use crate::ops::{gradcheck, GradcheckInputs, GradcheckReport};
use crate::pyramid::{FeatureExtractor, Fusion};
use crate::tensor::{Shape, Tensor};

/// Gradcheck outcome for one named operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub report: GradcheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Constant bias written into offset heads by [`desingularize`]. Offsets of
/// `b`, `3b` and `7b` (after two refinement levels) all keep a fractional
/// part between 0.2 and 0.8.
pub const HEAD_BIAS: f64 = 0.2;

/// Moves a freshly initialised store away from the points where the
/// deformable sampler is not differentiable: offset heads get bias
/// [`HEAD_BIAS`] and every all-zero weight gets small random values.
pub fn desingularize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed");
        if name.ends_with("head.bias") {
            t.data_mut().iter_mut().for_each(|v| *v = HEAD_BIAS);
        } else if name.ends_with("weight") && t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.005..0.005));
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Fractional offsets, fractional part in `[0.2, 0.8]`.
fn fractional_offsets(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-2i32..2) as f64 + rng.random_range(0.2..0.8))
}

pub fn check_bilinear(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random(&mut rng, Shape::new(1, 1, 3, 3), -1.0, 1.0);
    let offsets = fractional_offsets(&mut rng, Shape::new(1, 18, 3, 3));
    let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
    w.set(0, 0, 1, 1, 1.0);
    let inputs = GradcheckInputs::tensors(vec![("feature".into(), f), ("offsets".into(), offsets)]);
    gradcheck(&inputs, step, tolerance, |g, v| {
        let w = g.constant(w.clone());
        let m = g.constant(Tensor::full(Shape::new(1, 9, 3, 3), 1.0));
        g.deform_conv(v[0], w, None, v[1], m)
    })
}

pub fn check_deform_conv(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = GradcheckInputs::tensors(vec![
        ("feature".into(), random(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0)),
        ("weight".into(), random(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0)),
        ("offsets".into(), fractional_offsets(&mut rng, Shape::new(1, 18, 4, 4))),
        ("modulation".into(), random(&mut rng, Shape::new(1, 9, 4, 4), 0.1, 1.0)),
    ]);
    gradcheck(&inputs, step, tolerance, |g, v| g.deform_conv(v[0], v[1], None, v[2], v[3]))
}

/// A heatmap-aware FOC with a coarser prior, driving a deformable
/// convolution, on 8x8 inputs.
pub fn check_foc_deform(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(3);
    let cfg = FocConfig::new(4, 4).with_heatmaps(2).with_prior(true);
    let foc = Foc::new(&mut store, "foc", cfg).expect("valid config");
    desingularize(&mut store, 3);
    let w = random(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let inputs = GradcheckInputs::tensors(vec![
        ("feature_a".into(), random(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0)),
        ("feature_b".into(), random(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0)),
        ("heatmaps".into(), random(&mut rng, Shape::new(1, 2, 8, 8), 0.0, 1.0)),
        ("prior".into(), random(&mut rng, Shape::new(1, 18, 8, 8), -0.01, 0.01)),
    ])
    .with_params(&store, ["foc.head.weight".to_string(), "foc.in_heatmap.weight".to_string()]);
    gradcheck(&inputs, step, tolerance, |g, v| {
        let out = foc.forward(g, &[v[0], v[1]], Some(&[v[2]]), Some(v[3]));
        let w = g.constant(w.clone());
        g.deform_conv(v[0], w, None, out.offsets, out.mask)
    })
}

pub fn check_fuse_aligned(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(4);
    let fusion = Fusion::new(&mut store, "fusion", 5, 3, 2);
    let tensors = (0..5).map(|i| (format!("aligned{i}"), random(&mut rng, Shape::new(1, 3, 4, 4), -1.0, 1.0))).collect();
    let inputs = GradcheckInputs::tensors(tensors).with_params(&store, ["fusion.squeeze.weight".to_string()]);
    gradcheck(&inputs, step, tolerance, |g, v| fusion.forward(g, v))
}

pub fn check_combine(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new(5);
    let combiner = Combiner::new(&mut store, "combine", &CombinerConfig { width: 4, blocks: 2 }).expect("valid config");
    desingularize(&mut store, 5);
    let inputs = GradcheckInputs::tensors(vec![
        ("enhanced".into(), random(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0)),
        ("interpolated".into(), random(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0)),
    ])
    .with_params(&store, ["combine.project.weight".to_string(), "combine.first.weight".to_string()]);
    gradcheck(&inputs, step, tolerance, |g, v| combiner.forward(g, v[0], v[1]))
}

/// The difference `gt - pred` and both of its gradient maps stay away from
/// zero, where the absolute value has a kink.
pub fn check_branch_loss(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = random(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
    let pred = Tensor::from_fn(gt.shape(), |_, c, y, x| {
        gt.at(0, c, y, x) - (0.1 + 0.03 * x as f64 + 0.05 * y as f64 + 0.01 * c as f64)
    });
    let inputs = GradcheckInputs::tensors(vec![("pred".into(), pred), ("gt".into(), gt)]);
    gradcheck(&inputs, step, tolerance, |g, v| branch_loss_var(g, v[0], v[1]).total)
}

pub fn check_extract_pyramid(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new(7);
    let ex = FeatureExtractor::new(&mut store, "extract", 3, 1);
    let inputs = GradcheckInputs::tensors(vec![("frame".into(), random(&mut rng, Shape::new(1, 3, 16, 16), 0.0, 1.0))])
        .with_params(&store, ["extract.down3.weight".to_string()]);
    gradcheck(&inputs, step, tolerance, |g, v| {
        let p = ex.forward(g, v[0]);
        // Fold all three levels into one output.
        let l3 = g.upsample2x(p.level(2));
        let l32 = g.add(l3, p.level(1));
        let up = g.upsample2x(l32);
        g.add(up, p.level(0))
    })
}

pub fn check_combine_loss(step: f64, tolerance: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = random(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
    let pred = gt.map(|v| v + 0.25);
    let inputs = GradcheckInputs::tensors(vec![("pred".into(), pred), ("gt".into(), gt)]);
    gradcheck(&inputs, step, tolerance, |g, v| crate::losses::combine_loss_var(g, v[0], v[1]).total)
}

/// Every check above, in a fixed order.
pub fn gradcheck_suite(step: f64, tolerance: f64) -> Vec<OpCheck> {
    let checks: [(&str, fn(f64, f64) -> GradcheckReport); 8] = [
        ("bilinear_sample", check_bilinear),
        ("deform_conv", check_deform_conv),
        ("foc_forward", check_foc_deform),
        ("extract_pyramid", check_extract_pyramid),
        ("fuse_aligned", check_fuse_aligned),
        ("combine", check_combine),
        ("branch_loss", check_branch_loss),
        ("combine_loss", check_combine_loss),
    ];
    checks.iter().map(|(op, f)| OpCheck { op: op.to_string(), report: f(step, tolerance) }).collect()
}
