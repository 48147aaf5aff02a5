//! Inference with trained checkpoints: single- and two-stage deblurring and
//! evaluation over a split.

use finenet_core::error::{Error, Result};
use finenet_core::face_prior::HeatmapStack;
use finenet_core::model::ModelConfig;
use finenet_core::nn::ParamStore;
use finenet_core::{Frame, FrameWindow};
use finenet_data::sample::{video_samples, Sample};
use finenet_data::window::make_windows;
use finenet_data::{Split, VideoData};

use crate::checkpoint::{Checkpoint, RunDir};
use crate::config::Stage;
use crate::report::{FrameRow, Report};
use crate::stage::StageModel;

/// A restored stage network and its weights.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub stage: Stage,
    pub model: StageModel,
    pub store: ParamStore,
}

impl Loaded {
    pub fn new(stage: Stage, model: StageModel, store: ParamStore) -> Self {
        Loaded { stage, model, store }
    }

    /// Restores `ckpt` after checking it matches `config`.
    pub fn restore(ckpt: &Checkpoint, stage: Stage, config: &ModelConfig) -> Result<Self> {
        let (model, store) = ckpt.restore(stage, config)?;
        Ok(Loaded { stage, model, store })
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.model.uses_heatmaps()
    }

    /// Clamped branch output for one window.
    pub fn branch_output(&self, window: &FrameWindow, heatmaps: Option<&[HeatmapStack; 5]>) -> Result<Frame> {
        let hm = if self.uses_heatmaps() {
            Some(heatmaps.ok_or_else(|| Error::Data(format!("the {} network needs landmark heatmaps", self.stage)))?.as_slice())
        } else {
            None
        };
        match &self.model {
            StageModel::Enhance(b) => b.enhance(&self.store, window, hm),
            StageModel::Interp(b) => b.interpolate_window(&self.store, window, hm),
            _ => Err(Error::invalid(format!("the {} network does not take frame windows", self.stage))),
        }
    }
}

/// The three outputs for one target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DeblurResult {
    pub enhanced: Frame,
    pub interpolated: Frame,
    pub combined: Frame,
}

/// Replaces each degraded frame of `video` by the stage-1 output for it.
pub fn prefilter(stage1: &Loaded, video: &VideoData) -> Result<VideoData> {
    let windows = make_windows(&video.blurry, None)?;
    let blurry = windows.iter().map(|w| stage1.branch_output(w, None)).collect::<Result<Vec<_>>>()?;
    Ok(VideoData { blurry, ..video.clone() })
}

/// Enhancement and interpolation branches, the combination module and an
/// optional stage-1 model.
#[derive(Clone, Debug)]
pub struct FineNet {
    pub config: ModelConfig,
    pub stage1: Option<Loaded>,
    pub enhance: Loaded,
    pub interp: Loaded,
    pub combine: Loaded,
}

impl FineNet {
    pub fn from_checkpoints(
        config: &ModelConfig,
        stage1: Option<&Checkpoint>,
        enhance: &Checkpoint,
        interp: &Checkpoint,
        combine: &Checkpoint,
    ) -> Result<Self> {
        Ok(FineNet {
            config: config.clone(),
            stage1: stage1.map(|c| Loaded::restore(c, Stage::Stage1, config)).transpose()?,
            enhance: Loaded::restore(enhance, Stage::Enhance, config)?,
            interp: Loaded::restore(interp, Stage::Interp, config)?,
            combine: Loaded::restore(combine, Stage::Combine, config)?,
        })
    }

    /// Loads the inference checkpoints of a run directory.
    pub fn load(run: &RunDir, config: &ModelConfig, two_stage: bool) -> Result<Self> {
        let stage1 = two_stage.then(|| run.load_for_inference(Stage::Stage1)).transpose()?;
        let enhance = run.load_for_inference(Stage::Enhance)?;
        let interp = run.load_for_inference(Stage::Interp)?;
        let combine = run.load_for_inference(Stage::Combine)?;
        FineNet::from_checkpoints(config, stage1.as_ref(), &enhance, &interp, &combine)
    }

    /// The same network without its stage-1 model.
    pub fn single_stage(&self) -> FineNet {
        FineNet { stage1: None, ..self.clone() }
    }

    pub fn uses_heatmaps(&self) -> bool {
        [&self.enhance, &self.interp, &self.combine].iter().any(|l| l.uses_heatmaps())
    }

    /// Runs the second stage on one window, without any prefiltering.
    pub fn deblur_window(&self, window: &FrameWindow, heatmaps: Option<&[HeatmapStack; 5]>) -> Result<DeblurResult> {
        let enhanced = self.enhance.branch_output(window, heatmaps)?;
        let interpolated = self.interp.branch_output(window, heatmaps)?;
        let combined = match &self.combine.model {
            StageModel::Combine(c) => c.combine(&self.combine.store, &enhanced, &interpolated)?,
            StageModel::Early(e) => {
                let hm = if self.combine.uses_heatmaps() {
                    Some(heatmaps.ok_or_else(|| Error::Data("early fusion needs landmark heatmaps".into()))?.as_slice())
                } else {
                    None
                };
                e.deblur(&self.combine.store, window, hm)?
            }
            _ => return Err(Error::invalid("combine checkpoint holds a branch network")),
        };
        Ok(DeblurResult { enhanced, interpolated, combined })
    }

    /// Windows of `video` after the optional stage-1 pass, with heatmaps
    /// when the network needs them.
    pub fn samples(&self, video: &VideoData, heatmap_sigma: f64) -> Result<Vec<Sample>> {
        let video = match &self.stage1 {
            Some(s1) => prefilter(s1, video)?,
            None => video.clone(),
        };
        video_samples(&video, self.uses_heatmaps(), heatmap_sigma)
    }

    /// One result per frame of `video`.
    pub fn deblur_video(&self, video: &VideoData, heatmap_sigma: f64) -> Result<Vec<DeblurResult>> {
        self.samples(video, heatmap_sigma)?.iter().map(|s| self.deblur_window(&s.window, s.heatmaps.as_ref())).collect()
    }
}

/// Two-stage inference on a single window: each of its frames is first
/// restored by `stage1` (windows inside the five frames use edge
/// replication), then `net` runs on the restored window.
pub fn two_stage_deblur(window: &FrameWindow, heatmaps: Option<&[HeatmapStack; 5]>, stage1: &Loaded, net: &FineNet) -> Result<DeblurResult> {
    let inner = make_windows(&window.frames, None)?;
    let restored: Vec<Frame> = inner.iter().map(|w| stage1.branch_output(w, None)).collect::<Result<_>>()?;
    let frames: [Frame; 5] = restored.try_into().expect("five windows");
    let w = FrameWindow::new(frames, window.center, window.ground_truth.clone())?;
    net.single_stage().deblur_window(&w, heatmaps)
}

/// Per-frame and mean metrics of all three outputs over `videos`.
pub fn evaluate(net: &FineNet, videos: &[VideoData], split: Split, heatmap_sigma: f64, config_hash: &str) -> Result<Report> {
    let mut rows = Vec::new();
    for video in videos {
        let sharp = video.sharp.as_ref().ok_or_else(|| Error::Data(format!("video {} has no ground truth", video.id)))?;
        for (t, r) in net.deblur_video(video, heatmap_sigma)?.iter().enumerate() {
            rows.push(FrameRow::measure(&video.id, t, &r.enhanced, &r.interpolated, &r.combined, &sharp[t])?);
        }
    }
    Ok(Report::new(rows, split.as_str(), config_hash))
}
