//! Training samples and mini-batches.

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::HeatmapStack;
use finenet_core::{FrameWindow, Tensor};

use crate::dataset::VideoData;
use crate::window::{make_windows, window_heatmaps};

/// A window with its heatmaps, when landmarks are known.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: String,
    pub window: FrameWindow,
    pub heatmaps: Option<[HeatmapStack; 5]>,
}

/// Every window of `video`. Heatmaps are rendered only when `with_heatmaps`
/// is set, and then the video must carry landmarks.
pub fn video_samples(video: &VideoData, with_heatmaps: bool, sigma: f64) -> Result<Vec<Sample>> {
    let windows = make_windows(&video.blurry, video.sharp.as_deref())?;
    let heatmaps = if with_heatmaps {
        let track = video
            .landmarks
            .as_ref()
            .ok_or_else(|| Error::Data(format!("video {} has no landmark sidecar", video.id)))?;
        Some(window_heatmaps(track, video.height(), video.width(), sigma)?)
    } else {
        None
    };
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(t, window)| Sample { video: video.id.clone(), window, heatmaps: heatmaps.as_ref().map(|h| h[t].clone()) })
        .collect())
}

pub fn samples(videos: &[VideoData], with_heatmaps: bool, sigma: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(video_samples(v, with_heatmaps, sigma)?);
    }
    Ok(out)
}

/// Samples stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Window positions `[t-2..t+2]`, each `(B, 3, H, W)`.
    pub frames: [Tensor; 5],
    pub heatmaps: Option<[Tensor; 5]>,
    /// Sharp centre frames, `(B, 3, H, W)`.
    pub target: Tensor,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("a batch needs at least one sample"));
        }
        let frames = (0..5)
            .map(|i| Tensor::stack(&samples.iter().map(|s| s.window.frames[i].tensor()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let with_hm = samples[0].heatmaps.is_some();
        if samples.iter().any(|s| s.heatmaps.is_some() != with_hm) {
            return Err(Error::invalid("batch mixes samples with and without heatmaps"));
        }
        let heatmaps = if with_hm {
            let h = (0..5)
                .map(|i| Tensor::stack(&samples.iter().map(|s| s.heatmaps.as_ref().expect("checked")[i].tensor()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            Some(h.try_into().expect("five positions"))
        } else {
            None
        };
        let targets = samples
            .iter()
            .map(|s| {
                s.window
                    .ground_truth
                    .as_ref()
                    .map(|f| f.tensor())
                    .ok_or_else(|| Error::Data(format!("window {} of {} has no ground truth", s.window.center, s.video)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { frames: frames.try_into().expect("five positions"), heatmaps, target: Tensor::stack(&targets)? })
    }

    pub fn len(&self) -> usize {
        self.target.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
