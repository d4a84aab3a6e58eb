//! NIR-assisted low-light image denoising.
//!
//! A small multi-scale encoder–decoder denoiser that fuses features from
//! a noisy RGB frame and a clean near-infrared guide frame. Fusion is
//! either a naive sum or a selective fusion module that predicts
//! complementary per-channel, per-pixel weights for the two streams.
//! Everything runs on a from-scratch f64 tensor library with tape-based
//! reverse-mode differentiation, so gradients are checkable against
//! finite differences end to end.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod modulation;
pub mod net;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvKernel, Shape4, Tensor4};
