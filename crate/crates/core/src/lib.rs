//! Blind single-image super-resolution built from scratch: a reverse-mode
//! autodiff engine, the NLC building block (non-local sparse attention,
//! depth-wise convolution and channel attention), a Unet generator with a
//! bicubic skip, Gaussian blur degradation, center-then-random patch
//! sampling, two-stage training and Y-channel PSNR/SSIM evaluation.

pub mod blocks;
pub mod cli;
pub mod data;
pub mod degradation;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Bound, ParamInit, ParamStore};
pub use tensor::{Scalar, Tape, Tensor, Var};
