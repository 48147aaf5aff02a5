use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// An RGB image `(1, 3, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(format!("frame needs shape (1, 3, H, W), got {s}")));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        Ok(Frame(t))
    }

    /// Clamps into `[0, 1]` first; use for network outputs at inference.
    pub fn from_clamped(t: &Tensor) -> Result<Self> {
        if !t.all_finite() {
            return Err(Error::invalid("frame contains non-finite values"));
        }
        Frame::new(t.clamp(0.0, 1.0))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Frame::new(Tensor::full(Shape::new(1, 3, height, width), value))
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Five consecutive frames ordered `[t-2, t-1, t, t+1, t+2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWindow {
    pub frames: [Frame; 5],
    /// Index of the centre frame in its source video.
    pub center: usize,
    /// Sharp centre frame, when known.
    pub ground_truth: Option<Frame>,
}

impl FrameWindow {
    pub const LEN: usize = 5;
    pub const CENTER: usize = 2;

    pub fn new(frames: [Frame; 5], center: usize, ground_truth: Option<Frame>) -> Result<Self> {
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::invalid("window frames differ in size"));
        }
        if let Some(gt) = &ground_truth {
            if (gt.height(), gt.width()) != (h, w) {
                return Err(Error::invalid("ground truth differs in size from window frames"));
            }
        }
        Ok(FrameWindow { frames, center, ground_truth })
    }

    pub fn target(&self) -> &Frame {
        &self.frames[Self::CENTER]
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}
