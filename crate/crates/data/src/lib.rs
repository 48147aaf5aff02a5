//! Data for FineNet: random motion-blur kernels, degradation, procedural
//! face videos with landmark tracks, windowing, splits and the dataset
//! directory layout.

pub mod blur;
pub mod dataset;
pub mod degrade;
pub mod io;
pub mod sample;
pub mod synth;
pub mod window;

pub use blur::{sample_blur_kernel, BlurConfig, BlurKernel};
pub use dataset::{DataConfig, DatasetIndex, Split, VideoData, VideoRecord};
pub use degrade::degrade;
pub use sample::{Batch, Sample};
pub use synth::{synth_video, Motion, MotionKind, SynthConfig};
pub use window::make_windows;
