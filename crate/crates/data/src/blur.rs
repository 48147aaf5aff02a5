//! Random motion-blur kernels from camera-shake trajectories.
//!
//! A trajectory is a polyline of a few segments whose heading turns by a
//! random angle at each joint. It is rasterised by dense sampling with
//! bilinear splatting, optionally smoothed by a Gaussian, and normalised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use finenet_core::error::{Error, Result};

pub const MAX_KERNEL_SIZE: usize = 31;

/// Ranges the per-frame kernel parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurConfig {
    /// Multiplies the sampled trajectory length; 0 disables blur.
    pub strength: f64,
    /// Trajectory length range in pixels.
    pub min_length: f64,
    pub max_length: f64,
    /// Upper bound of the Gaussian smoothing sigma, in pixels.
    pub max_smoothing: f64,
    /// Maximum heading change at each polyline joint, in degrees.
    pub max_turn: f64,
    pub segments: usize,
    /// Additive Gaussian noise sigma range, in intensity units.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Use one kernel per video instead of one per frame.
    pub temporal_coherence: bool,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig {
            strength: 1.0,
            min_length: 2.0,
            max_length: 9.0,
            max_smoothing: 0.6,
            max_turn: 60.0,
            segments: 3,
            noise_min: 0.0,
            noise_max: 0.01,
            temporal_coherence: false,
        }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.strength, self.min_length, self.max_length, self.max_smoothing, self.max_turn, self.noise_min, self.noise_max];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("blur parameters must be finite and non-negative"));
        }
        if self.max_length < 1.0 {
            return Err(Error::config(format!("blur max_length must be at least 1, got {}", self.max_length)));
        }
        if self.min_length > self.max_length || self.noise_min > self.noise_max {
            return Err(Error::config("blur ranges must satisfy min <= max"));
        }
        if self.segments == 0 {
            return Err(Error::config("blur trajectories need at least one segment"));
        }
        Ok(())
    }
}

/// Non-negative `m x m` taps summing to one, `m` odd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size > MAX_KERNEL_SIZE || taps.len() != size * size {
            return Err(Error::invalid(format!("blur kernel must be odd-sized up to {MAX_KERNEL_SIZE} with size^2 taps")));
        }
        if taps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("blur kernel taps must be finite and non-negative"));
        }
        let s: f64 = taps.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("blur kernel sums to {s}, not 1")));
        }
        Ok(BlurKernel { size, taps })
    }

    pub fn delta() -> Self {
        BlurKernel { size: 1, taps: vec![1.0] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.taps[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }
}

fn splat(grid: &mut [f64], m: usize, y: f64, x: f64, w: f64) {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < m && (xx as usize) < m {
                grid[yy as usize * m + xx as usize] += w * wy * wx;
            }
        }
    }
}

fn gaussian_smooth(grid: &[f64], m: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; m * m];
        for y in 0..m {
            for x in 0..m {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let d = j as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < m && (xx as usize) < m {
                        acc += kv * src[yy as usize * m + xx as usize];
                    }
                }
                out[y * m + x] = acc;
            }
        }
        out
    };
    pass(&pass(grid, true), false)
}

/// Draws one kernel. Identical `(seed, config)` give bit-identical kernels.
pub fn sample_blur_kernel(seed: u64, config: &BlurConfig) -> Result<BlurKernel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = config.strength * rng.random_range(config.min_length..=config.max_length);
    let sigma = config.strength * rng.random_range(0.0..=config.max_smoothing);
    if length < 1e-9 {
        return Ok(BlurKernel::delta());
    }

    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut points = vec![(0.0f64, 0.0f64)];
    let seg = length / config.segments as f64;
    for _ in 0..config.segments {
        let (y, x) = *points.last().expect("non-empty");
        points.push((y + seg * heading.sin(), x + seg * heading.cos()));
        heading += rng.random_range(-1.0..=1.0) * config.max_turn.to_radians();
    }
    let n = points.len() as f64;
    let (cy, cx) = points.iter().fold((0.0, 0.0), |(a, b), (y, x)| (a + y / n, b + x / n));
    let extent = points.iter().map(|(y, x)| (y - cy).abs().max((x - cx).abs())).fold(0.0, f64::max);
    let half = ((extent + 3.0 * sigma).ceil() as usize + 1).min(MAX_KERNEL_SIZE / 2);
    let m = 2 * half + 1;

    let mut grid = vec![0.0; m * m];
    let steps_per_px = 20.0;
    for w in points.windows(2) {
        let ((y0, x0), (y1, x1)) = (w[0], w[1]);
        let steps = (seg * steps_per_px).ceil().max(1.0) as usize;
        for s in 0..steps {
            let t = (s as f64 + 0.5) / steps as f64;
            let (y, x) = (y0 + t * (y1 - y0) - cy + half as f64, x0 + t * (x1 - x0) - cx + half as f64);
            splat(&mut grid, m, y, x, 1.0);
        }
    }
    if sigma > 0.05 {
        grid = gaussian_smooth(&grid, m, sigma);
    }
    let total: f64 = grid.iter().sum();
    grid.iter_mut().for_each(|v| *v /= total);
    BlurKernel::new(m, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_is_a_delta() {
        let cfg = BlurConfig { strength: 0.0, ..BlurConfig::default() };
        assert_eq!(sample_blur_kernel(3, &cfg).unwrap(), BlurKernel::delta());
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = BlurConfig { max_length: 0.5, min_length: 0.0, ..BlurConfig::default() };
        assert_eq!(sample_blur_kernel(1, &cfg).unwrap_err().category(), "config");
    }

    #[test]
    fn kernels_are_normalised_and_bounded() {
        let cfg = BlurConfig { max_length: 40.0, max_smoothing: 2.0, ..BlurConfig::default() };
        for seed in 0..50 {
            let k = sample_blur_kernel(seed, &cfg).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-6);
            assert!(k.size() % 2 == 1 && k.size() <= MAX_KERNEL_SIZE);
            assert!(k.taps().iter().all(|&t| t >= 0.0));
        }
    }
}
