//! Procedural face-like videos with known motion and landmark tracks.
//!
//! A frame is an analytic pattern evaluated at pixel positions in face
//! coordinates, so any motion model gives exact ground-truth landmarks.
//! Translations are applied to the integer pixel grid before any other
//! arithmetic, which makes integer shifts reproduce pixels exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::LandmarkSet;
use finenet_core::{Frame, Shape, Tensor};

pub const TEMPLATE_LANDMARKS: usize = 68;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Translate,
    Rotate,
    LandmarkFace,
}

/// Concrete motion of one video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    /// Constant shift per frame, `(dy, dx)` in pixels.
    Translate { dy: f64, dx: f64 },
    /// Constant rotation about the face centre, degrees per frame.
    Rotate { degrees: f64 },
    /// Smooth oscillating head motion with a moving mouth.
    LandmarkFace { amplitude: f64, degrees: f64, period: f64, phase: [f64; 4] },
}

impl Motion {
    /// Draws a motion of `kind` bounded by the config's speed limits.
    pub fn sample(kind: MotionKind, config: &SynthConfig, rng: &mut impl Rng) -> Motion {
        let speed = config.max_speed;
        match kind {
            MotionKind::Translate => {
                let dy = if speed > 0.0 { rng.random_range(-speed..=speed) } else { 0.0 };
                let dx = if speed > 0.0 { rng.random_range(-speed..=speed) } else { 0.0 };
                Motion::Translate { dy, dx }
            }
            MotionKind::Rotate => {
                let r = config.max_rotation;
                Motion::Rotate { degrees: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 } }
            }
            MotionKind::LandmarkFace => {
                let period = rng.random_range(6.0..14.0);
                // Peak speed of A sin(2 pi k / T) is 2 pi A / T.
                let amplitude = speed * period / std::f64::consts::TAU;
                let phase = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
                Motion::LandmarkFace { amplitude, degrees: config.max_rotation * period / std::f64::consts::TAU, period, phase }
            }
        }
    }

    /// `(dy, dx, angle in radians, mouth opening)` at frame `k`.
    fn state(&self, k: usize) -> (f64, f64, f64, f64) {
        let k = k as f64;
        match *self {
            Motion::Translate { dy, dx } => (k * dy, k * dx, 0.0, 0.3),
            Motion::Rotate { degrees } => (0.0, 0.0, (k * degrees).to_radians(), 0.3),
            Motion::LandmarkFace { amplitude, degrees, period, phase } => {
                let w = std::f64::consts::TAU / period;
                let s = |p: f64, f: f64| (f * w * k + p).sin() - p.sin();
                (
                    amplitude * s(phase[0], 1.0),
                    amplitude * s(phase[1], 0.8),
                    degrees.to_radians() * s(phase[2], 0.6),
                    0.5 + 0.5 * (1.3 * w * k + phase[3]).sin(),
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub kind: MotionKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub landmarks: usize,
    /// Upper bound of the per-frame displacement, in pixels.
    pub max_speed: f64,
    /// Upper bound of the per-frame rotation, in degrees.
    pub max_rotation: f64,
    /// Face half-height as a fraction of the smaller frame side.
    pub face_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: MotionKind::LandmarkFace,
            frames: 12,
            height: 32,
            width: 32,
            landmarks: TEMPLATE_LANDMARKS,
            max_speed: 1.5,
            max_rotation: 3.0,
            face_scale: 0.35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 5 {
            return Err(Error::config(format!("synthetic videos need at least 5 frames, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("synthetic frame size must be non-zero"));
        }
        if self.landmarks == 0 || self.landmarks > TEMPLATE_LANDMARKS {
            return Err(Error::config(format!("landmark count must be in 1..={TEMPLATE_LANDMARKS}, got {}", self.landmarks)));
        }
        let vals = [self.max_speed, self.max_rotation, self.face_scale];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.face_scale == 0.0 {
            return Err(Error::config("synthetic motion bounds must be finite and non-negative, face scale positive"));
        }
        Ok(())
    }
}

/// Sharp frames and the landmark track of one synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub motion: Motion,
    pub frames: Vec<Frame>,
    pub landmarks: Vec<LandmarkSet>,
}

/// Template in face coordinates: `u` to the right, `v` down, face height 2.
fn template(open: f64) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let mut p = Vec::with_capacity(TEMPLATE_LANDMARKS);
    for k in 0..17 {
        let a = PI * k as f64 / 16.0;
        p.push((-0.85 * a.cos(), -0.1 + 0.95 * a.sin()));
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            let u = side * (0.6 - 0.45 * t);
            p.push((u, -0.45 - 0.06 * (PI * t).sin()));
        }
    }
    // Brows are listed left to right.
    p[22..27].reverse();
    for k in 0..4 {
        p.push((0.0, -0.3 + 0.1 * k as f64));
    }
    for k in 0..5 {
        p.push((-0.15 + 0.075 * k as f64, 0.18));
    }
    for cx in [-0.35, 0.35] {
        for k in 0..6 {
            let a = PI * k as f64 / 3.0;
            p.push((cx - 0.14 * a.cos(), -0.25 - 0.06 * a.sin()));
        }
    }
    for (count, rx, ry) in [(12, 0.35, 0.12 + 0.1 * open), (8, 0.2, 0.04 + 0.1 * open)] {
        for k in 0..count {
            let a = 2.0 * PI * k as f64 / count as f64;
            p.push((-rx * a.cos(), 0.5 - ry * a.sin()));
        }
    }
    p
}

/// Template indices kept when `l` landmarks are requested.
pub fn landmark_subset(l: usize) -> Vec<usize> {
    (0..l).map(|i| i * TEMPLATE_LANDMARKS / l).collect()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-video appearance drawn from the seed.
#[derive(Clone, Debug)]
struct Appearance {
    center: (f64, f64),
    scale: f64,
    angle: f64,
    background: [f64; 3],
    skin: [f64; 3],
    texture: [(f64, f64, f64, f64); 2],
}

impl Appearance {
    fn sample(rng: &mut impl Rng, config: &SynthConfig) -> Self {
        let (h, w) = (config.height as f64, config.width as f64);
        let jitter = 0.08 * h.min(w);
        let mut colour = |lo: f64, hi: f64| std::array::from_fn(|_| rng.random_range(lo..hi));
        let background = colour(0.15, 0.45);
        let skin = colour(0.55, 0.85);
        Appearance {
            center: (
                (w - 1.0) / 2.0 + rng.random_range(-jitter..=jitter),
                (h - 1.0) / 2.0 + rng.random_range(-jitter..=jitter),
            ),
            scale: config.face_scale * h.min(w) * rng.random_range(0.9..1.1),
            angle: rng.random_range(-0.15..0.15),
            background,
            skin,
            texture: std::array::from_fn(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let f = rng.random_range(4.0..9.0);
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.05..0.12))
            }),
        }
    }

    fn shade(&self, u: f64, v: f64, open: f64, dots: &[(f64, f64)]) -> [f64; 3] {
        let tex: f64 = self.texture.iter().map(|(fu, fv, ph, amp)| amp * (fu * u + fv * v + ph).sin()).sum();
        let r = ((u / 0.85).powi(2) + ((v - 0.05) / 1.05).powi(2)).sqrt();
        let face = 1.0 - smoothstep(0.92, 1.08, r);
        let ellipse = |cu: f64, cv: f64, ru: f64, rv: f64| {
            let d = (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt();
            1.0 - smoothstep(0.8, 1.2, d)
        };
        let eyes = ellipse(-0.35, -0.25, 0.16, 0.08).max(ellipse(0.35, -0.25, 0.16, 0.08));
        let brows = ellipse(-0.38, -0.47, 0.24, 0.05).max(ellipse(0.38, -0.47, 0.24, 0.05));
        let mouth = ellipse(0.0, 0.5, 0.33, 0.1 + 0.1 * open);
        let nose = ellipse(0.0, 0.1, 0.07, 0.2);
        let dot: f64 = dots.iter().map(|(du, dv)| (-((u - du).powi(2) + (v - dv).powi(2)) / 0.004).exp()).sum::<f64>().min(1.0);
        let dark = (0.65 * eyes.max(mouth)).max(0.45 * brows).max(0.2 * nose).max(0.25 * dot);
        std::array::from_fn(|c| {
            let base = self.background[c] * (1.0 + tex) * (1.0 - face) + self.skin[c] * (1.0 + 0.3 * tex) * face;
            (base * (1.0 - dark * face)).clamp(0.0, 1.0)
        })
    }
}

/// Rounds to the nearest 8-bit level so frames survive PNG round trips.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a video with the given motion; `seed` fixes the appearance.
pub fn synth_video(motion: &Motion, config: &SynthConfig, seed: u64) -> Result<SynthVideo> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let look = Appearance::sample(&mut rng, config);
    let subset = landmark_subset(config.landmarks);
    let (cx, cy) = look.center;
    let mut frames = Vec::with_capacity(config.frames);
    let mut landmarks = Vec::with_capacity(config.frames);
    for k in 0..config.frames {
        let (dy, dx, rot, open) = motion.state(k);
        let angle = look.angle + rot;
        let (sin, cos) = angle.sin_cos();
        let dots = template(open);
        let mut t = Tensor::zeros(Shape::new(1, 3, config.height, config.width));
        for y in 0..config.height {
            for x in 0..config.width {
                let (qx, qy) = (x as f64 - dx - cx, y as f64 - dy - cy);
                let u = (cos * qx + sin * qy) / look.scale;
                let v = (-sin * qx + cos * qy) / look.scale;
                let rgb = look.shade(u, v, open, &dots);
                for (c, val) in rgb.iter().enumerate() {
                    t.set(0, c, y, x, quantize(*val));
                }
            }
        }
        frames.push(Frame::new(t)?);
        let points = subset
            .iter()
            .map(|&i| {
                let (u, v) = dots[i];
                let (px, py) = (look.scale * (cos * u - sin * v), look.scale * (sin * u + cos * v));
                (px + cx + dx, py + cy + dy)
            })
            .collect();
        landmarks.push(LandmarkSet::new(points)?);
    }
    Ok(SynthVideo { motion: *motion, frames, landmarks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_has_full_layout() {
        assert_eq!(template(0.3).len(), TEMPLATE_LANDMARKS);
        let s = landmark_subset(5);
        assert_eq!(s, vec![0, 13, 27, 40, 54]);
        assert_eq!(landmark_subset(68), (0..68).collect::<Vec<_>>());
    }

    #[test]
    fn config_limits() {
        let bad = SynthConfig { frames: 4, ..SynthConfig::default() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = SynthConfig { landmarks: 69, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
    }
}
