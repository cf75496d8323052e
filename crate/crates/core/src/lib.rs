//! Lesion saliency segmentation with factorized dilated convolutions and
//! pyramid attention, on a small reverse-mode autograd engine.
//!
//! Layout:
//! - [`tensor`], [`autograd`]: dense tensors and the gradient tape
//! - [`nn`]: convolution, normalization, pooling, resize, softmax, init
//! - [`dsf`]: the factorized dilated-pyramid unit
//! - [`attention`]: scale-wise pyramid attention and feature re-weighting
//! - [`model`]: encoder–decoder assembly and the fused loss
//! - [`metrics`]: F-measure, MAE, PRI, VOI, GCE, BDE, PR curves
//! - [`data`]: synthetic samples, PPM/PGM, checkpoints
//! - [`train`]: optimizer, schedule, training loop, configuration
//! - [`verify`]: the self-check suite behind `verify`

pub mod attention;
pub mod data;
pub mod autograd;
pub mod dsf;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
