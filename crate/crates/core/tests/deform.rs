mod common;

use common::*;
use finenet_core::ops::{conv2d, deform_conv, gradcheck, ConvKernel, GradcheckInputs, OffsetField};
use finenet_core::{Graph, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn deform_matches_definition_with_fractional_offsets() {
    let mut r = rng(11);
    for _ in 0..10 {
        let f = random_map(&mut r, 3, 6, 5);
        let k = random_kernel(&mut r, 2, 3, 3);
        let field = random_field(&mut r, 9, 6, 5);
        let out = deform_conv(&f, &k, &field).unwrap();
        let want = naive_deform(f.tensor(), k.weights(), field.offsets(), field.modulation());
        assert!(out.tensor().max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn shift_right_reads_the_left_translated_input() {
    let mut r = rng(12);
    let f = random_map(&mut r, 2, 5, 5);
    let k = random_kernel(&mut r, 3, 2, 3);
    let field = OffsetField::constant(9, 5, 5, 0.0, 1.0, 1.0).unwrap();
    let out = deform_conv(&f, &k, &field).unwrap();
    // Input translated left by one pixel, zero outside the original support.
    let want = naive_conv_shifted(f.tensor(), k.weights(), 0, 1);
    assert!(out.tensor().max_abs_diff(&want) < 1e-12);
}

#[test]
fn gradcheck_deform_conv() {
    let mut r = rng(13);
    let f = random_tensor(&mut r, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let w = random_tensor(&mut r, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let field = random_field(&mut r, 9, 4, 4);
    let inputs = GradcheckInputs::tensors(vec![
        ("feature".into(), f),
        ("weight".into(), w),
        ("offsets".into(), field.offsets().clone()),
        ("modulation".into(), field.modulation().clone()),
    ]);
    let report = gradcheck(&inputs, 1e-3, 1e-4, |g, v| g.deform_conv(v[0], v[1], None, v[2], v[3]));
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.entries.len(), 4);
}

#[test]
fn zero_offset_weight_gradient_equals_conv_weight_gradient() {
    let mut r = rng(14);
    let f = random_tensor(&mut r, Shape::new(1, 2, 5, 4), -1.0, 1.0);
    let w = random_tensor(&mut r, Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let up = random_tensor(&mut r, Shape::new(1, 3, 5, 4), -1.0, 1.0);
    let grad = |deform: bool| {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let wv = g.leaf(w.clone());
        let y = if deform {
            let o = g.constant(Tensor::zeros(Shape::new(1, 18, 5, 4)));
            let m = g.constant(Tensor::full(Shape::new(1, 9, 5, 4), 1.0));
            g.deform_conv(x, wv, None, o, m)
        } else {
            g.conv2d(x, wv, None, 1, 1)
        };
        let u = g.constant(up.clone());
        let p = g.mul(y, u);
        let s = g.sum(p);
        g.backward(s).get(wv).unwrap().clone()
    };
    assert!(grad(true).max_abs_diff(&grad(false)) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zero_offsets_unit_modulation_is_plain_conv(
        c in 1usize..4, o in 1usize..4, h in 1usize..8, w in 1usize..8, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let f = random_map(&mut r, c, h, w);
        let k = random_kernel(&mut r, o, c, 3);
        let d = deform_conv(&f, &k, &OffsetField::identity(9, h, w)).unwrap();
        let p = conv2d(&f, &k).unwrap();
        prop_assert!(d.tensor().max_abs_diff(p.tensor()) <= 1e-6);
        prop_assert!(p.tensor().max_abs_diff(&naive_conv(f.tensor(), k.weights())) <= 1e-12);
    }

    #[test]
    fn integer_offsets_translate_the_input(
        dy in -2i64..3, dx in -2i64..3, h in 2usize..7, w in 2usize..7, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let f = random_map(&mut r, 2, h, w);
        let k = random_kernel(&mut r, 2, 2, 3);
        let field = OffsetField::constant(9, h, w, dy as f64, dx as f64, 1.0).unwrap();
        let out = deform_conv(&f, &k, &field).unwrap();
        prop_assert!(out.tensor().max_abs_diff(&naive_conv_shifted(f.tensor(), k.weights(), dy, dx)) <= 1e-12);
    }

    #[test]
    fn modulation_is_linear_per_tap(tap in 0usize..9, alpha in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_map(&mut r, 2, 4, 4);
        let mut wt = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let kernel_full = random_kernel(&mut r, 1, 2, 3);
        for c in 0..2 {
            wt.set(c / 2, c, tap / 3, tap % 3, kernel_full.weights().at(0, c, tap / 3, tap % 3));
        }
        let k = ConvKernel::new(wt).unwrap();
        let base = random_field(&mut r, 9, 4, 4);
        let mut scaled_m = base.modulation().clone();
        for v in scaled_m.data_mut()[tap * 16..(tap + 1) * 16].iter_mut() {
            *v *= alpha;
        }
        let scaled = OffsetField::new(base.offsets().clone(), scaled_m).unwrap();
        let a = deform_conv(&f, &k, &base).unwrap();
        let b = deform_conv(&f, &k, &scaled).unwrap();
        let want = a.tensor().map(|v| v * alpha);
        prop_assert!(b.tensor().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn bilinear_matches_definition(y in -2.0f64..6.0, x in -2.0f64..6.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_map(&mut r, 2, 4, 4);
        for c in 0..2 {
            let v = finenet_core::ops::bilinear_sample(&f, y, x, c).unwrap();
            prop_assert!((v - naive_bilinear(f.tensor(), c, y, x)).abs() <= 1e-12);
        }
    }
}
