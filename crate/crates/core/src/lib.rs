//! Scalp-image classification pipeline: denoising, contrast equalization,
//! class balancing, a small convolutional network trained with Adam, and
//! confusion-matrix evaluation.

pub mod dataset;
pub mod denoise;
pub mod equalize;
pub mod image;
pub mod rng;
pub mod nn;
pub mod metrics;
pub mod preprocess;
pub mod synthetic;
pub mod train;
