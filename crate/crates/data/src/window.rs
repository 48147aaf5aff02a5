//! Five-frame windows with edge replication at sequence boundaries.

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::{render_heatmaps, HeatmapStack, LandmarkSet};
use finenet_core::{Frame, FrameWindow};

/// Source indices of the window centred on `t`: `t-2..=t+2`, clamped into
/// `0..len`. For `t = 0` this is `[0, 0, 0, 1, 2]`.
pub fn window_indices(len: usize, t: usize) -> [usize; 5] {
    std::array::from_fn(|i| (t + i).saturating_sub(2).min(len - 1))
}

fn check_len(len: usize) -> Result<()> {
    if len < FrameWindow::LEN {
        return Err(Error::Data(format!("video has {len} frames, at least {} are needed", FrameWindow::LEN)));
    }
    Ok(())
}

/// One window per frame. `sharp`, when given, supplies each window's ground
/// truth and must match `blurry` in length.
pub fn make_windows(blurry: &[Frame], sharp: Option<&[Frame]>) -> Result<Vec<FrameWindow>> {
    check_len(blurry.len())?;
    if let Some(s) = sharp {
        if s.len() != blurry.len() {
            return Err(Error::Data(format!("{} sharp frames for {} blurry frames", s.len(), blurry.len())));
        }
    }
    (0..blurry.len())
        .map(|t| {
            let idx = window_indices(blurry.len(), t);
            FrameWindow::new(idx.map(|i| blurry[i].clone()), t, sharp.map(|s| s[t].clone()))
        })
        .collect()
}

/// Heatmap stacks for every window, in window order.
pub fn window_heatmaps(landmarks: &[LandmarkSet], height: usize, width: usize, sigma: f64) -> Result<Vec<[HeatmapStack; 5]>> {
    check_len(landmarks.len())?;
    let stacks: Vec<HeatmapStack> = landmarks.iter().map(|l| render_heatmaps(l, height, width, sigma)).collect::<Result<_>>()?;
    Ok((0..landmarks.len()).map(|t| window_indices(landmarks.len(), t).map(|i| stacks[i].clone())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_replication() {
        assert_eq!(window_indices(5, 0), [0, 0, 0, 1, 2]);
        assert_eq!(window_indices(5, 1), [0, 0, 1, 2, 3]);
        assert_eq!(window_indices(5, 2), [0, 1, 2, 3, 4]);
        assert_eq!(window_indices(5, 4), [2, 3, 4, 4, 4]);
        assert_eq!(window_indices(9, 6), [4, 5, 6, 7, 8]);
    }

    #[test]
    fn short_videos_rejected() {
        let f = vec![Frame::filled(2, 2, 0.0).unwrap(); 4];
        assert_eq!(make_windows(&f, None).unwrap_err().category(), "data");
    }
}
