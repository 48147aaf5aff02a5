//! PNG frames and landmark sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::{LandmarkDetector, LandmarkSet, PrecomputedLandmarks};
use finenet_core::{Frame, Shape, Tensor};

pub const LANDMARK_FILE: &str = "landmarks.txt";
pub const SHARP_DIR: &str = "sharp";

/// Six-digit frame id used for file names and sidecar records.
pub fn frame_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
    Frame::new(t)
}

/// Writes an 8-bit RGB PNG, rounding each value to the nearest level.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let t = frame.tensor();
    let img = image::RgbImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| (t.at(0, c, y as usize, x as usize) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_frames(paths: &[PathBuf]) -> Result<Vec<Frame>> {
    paths.iter().map(|p| read_png(p)).collect()
}

/// Landmark count of a sidecar, taken from its first record.
pub fn sidecar_landmark_count(text: &str) -> Result<usize> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::Data("landmark file has no records".into()))?;
    let coords = line.split_whitespace().count() - 1;
    if coords == 0 || coords % 2 != 0 {
        return Err(Error::Data(format!("landmark record has {coords} coordinates, expected an even, non-zero count")));
    }
    Ok(coords / 2)
}

pub fn read_sidecar(path: &Path) -> Result<PrecomputedLandmarks> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    PrecomputedLandmarks::parse(&text, sidecar_landmark_count(&text)?)
}

/// Landmarks for each frame in order, asked of `detector` by file stem.
/// A frame without a record is a `data-missing` error naming it.
pub fn landmark_track(detector: &impl LandmarkDetector, paths: &[PathBuf], frames: &[Frame]) -> Result<Vec<LandmarkSet>> {
    paths
        .iter()
        .zip(frames)
        .map(|(p, f)| detector.detect(p.file_stem().and_then(|s| s.to_str()).unwrap_or_default(), f))
        .collect()
}

pub fn write_sidecar(path: &Path, track: &[LandmarkSet]) -> Result<()> {
    let mut records = PrecomputedLandmarks::new();
    for (i, l) in track.iter().enumerate() {
        records.insert(frame_id(i), l.clone());
    }
    fs::write(path, records.format()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
