//! Blur-and-noise degradation of sharp frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use finenet_core::error::{Error, Result};
use finenet_core::{Frame, Shape, Tensor};

use crate::blur::BlurKernel;

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// 2D convolution with reflect padding; output has the input's size.
pub fn convolve(frame: &Frame, kernel: &BlurKernel) -> Tensor {
    let t = frame.tensor();
    let s = t.shape();
    let m = kernel.size();
    let r = (m / 2) as isize;
    Tensor::from_fn(Shape::new(1, s.c, s.h, s.w), |_, c, y, x| {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let k = kernel.at(i, j);
                if k == 0.0 {
                    continue;
                }
                let yy = reflect(y as isize - (i as isize - r), s.h);
                let xx = reflect(x as isize - (j as isize - r), s.w);
                acc += k * t.at(0, c, yy, xx);
            }
        }
        acc
    })
}

/// `clamp(frame * kernel + n)` with `n ~ N(0, noise_sigma^2)` drawn from `seed`.
pub fn degrade(frame: &Frame, kernel: &BlurKernel, noise_sigma: f64, seed: u64) -> Result<Frame> {
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be finite and non-negative, got {noise_sigma}")));
    }
    let mut out = convolve(frame, kernel);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Frame::from_clamped(&out)
}
