#![allow(dead_code)]

use finenet_core::ops::{ConvKernel, FeatureMap, OffsetField};
use finenet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(random_tensor(rng, Shape::new(1, c, h, w), -1.0, 1.0)).unwrap()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvKernel {
    ConvKernel::new(random_tensor(rng, Shape::new(out, inp, k, k), -1.0, 1.0)).unwrap()
}

/// Offsets whose fractional part stays in [0.15, 0.85], so small
/// perturbations never cross a pixel boundary.
pub fn random_field(rng: &mut ChaCha8Rng, taps: usize, h: usize, w: usize) -> OffsetField {
    let off = Tensor::from_fn(Shape::new(1, 2 * taps, h, w), |_, _, _, _| {
        rng.random_range(-2i32..2) as f64 + rng.random_range(0.15..0.85)
    });
    let m = Tensor::from_fn(Shape::new(1, taps, h, w), |_, _, _, _| rng.random_range(0.1..1.0));
    OffsetField::new(off, m).unwrap()
}

/// Reads `F(y, x)` with zeros outside the map.
pub fn pixel(f: &Tensor, c: usize, y: i64, x: i64) -> f64 {
    let s = f.shape();
    if y < 0 || x < 0 || y >= s.h as i64 || x >= s.w as i64 {
        0.0
    } else {
        f.at(0, c, y as usize, x as usize)
    }
}

/// Bilinear interpolation written from the definition.
pub fn naive_bilinear(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    (1.0 - fy) * (1.0 - fx) * pixel(f, c, y0, x0)
        + (1.0 - fy) * fx * pixel(f, c, y0, x0 + 1)
        + fy * (1.0 - fx) * pixel(f, c, y0 + 1, x0)
        + fy * fx * pixel(f, c, y0 + 1, x0 + 1)
}

/// `out(o, p) = sum_c sum_k w[o, c, k] F_c(p + p_k + dp_k) m_k`, stride 1,
/// taps enumerated row-major from the top-left corner.
pub fn naive_deform(f: &Tensor, w: &Tensor, off: &Tensor, m: &Tensor) -> Tensor {
    let s = f.shape();
    let ws = w.shape();
    let k = ws.h;
    let r = (k / 2) as i64;
    Tensor::from_fn(Shape::new(1, ws.n, s.h, s.w), |_, o, y, x| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let t = ky * k + kx;
                let py = y as f64 + (ky as i64 - r) as f64 + off.at(0, 2 * t, y, x);
                let px = x as f64 + (kx as i64 - r) as f64 + off.at(0, 2 * t + 1, y, x);
                let gate = m.at(0, t, y, x);
                for c in 0..s.c {
                    acc += w.at(o, c, ky, kx) * naive_bilinear(f, c, py, px) * gate;
                }
            }
        }
        acc
    })
}

/// Zero-padded stride-1 convolution from the definition.
pub fn naive_conv(f: &Tensor, w: &Tensor) -> Tensor {
    naive_conv_shifted(f, w, 0, 0)
}

/// Convolution of the translated input `g(y, x) = f(y + dy, x + dx)`, where
/// `g` lives on the whole plane and is zero outside the support of `f`.
pub fn naive_conv_shifted(f: &Tensor, w: &Tensor, dy: i64, dx: i64) -> Tensor {
    let s = f.shape();
    let ws = w.shape();
    let k = ws.h;
    let r = (k / 2) as i64;
    Tensor::from_fn(Shape::new(1, ws.n, s.h, s.w), |_, o, y, x| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                for c in 0..s.c {
                    acc += w.at(o, c, ky, kx) * pixel(f, c, y as i64 + ky as i64 - r + dy, x as i64 + kx as i64 - r + dx);
                }
            }
        }
        acc
    })
}
