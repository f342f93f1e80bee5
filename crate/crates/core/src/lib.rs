//! Diffusion pre-training followed by segmentation fine-tuning of the same
//! timestep-conditioned Unet, built on a small reverse-mode autodiff core.

pub mod baseline;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod segdata;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Gradients, Scalar, Tape, Tensor, Var};
