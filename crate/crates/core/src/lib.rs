//! Blind image denoising with a noise-estimation sub-network feeding a
//! dual-branch (u-shaped + dilated) convolutional denoiser, built on a small
//! reverse-mode autodiff tape over dense 4-D `f64` tensors.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use tape::{NodeId, Precision, Tape};
pub use tensor::{Shape, Tensor};
