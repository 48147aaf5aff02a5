//! FineNet: dual-branch face video deblurring.
//!
//! The crate contains a small `f64` tensor library with reverse-mode
//! differentiation, the modulated deformable convolution it is built around,
//! and the network: landmark heatmaps, face-aware offset estimation, the
//! enhancement and interpolation branches, the late-fusion combiner, losses
//! and quality metrics.

pub mod autograd;
pub mod checks;
pub mod combiner;
pub mod enhance;
pub mod error;
pub mod face_prior;
pub mod foc;
pub mod frame;
pub mod interp;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod pyramid;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use frame::{Frame, FrameWindow};
pub use tensor::{Shape, Tensor};
