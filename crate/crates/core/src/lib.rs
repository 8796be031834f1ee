pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod segmenter;
pub mod synth;

pub use error::{Error, Result};

/// Grayscale image, intensities nominally in `[-1, 1]`.
pub type Image = ndarray::Array2<f32>;
/// Binary mask with values in `{0, 1}`.
pub type Mask = ndarray::Array2<u8>;
