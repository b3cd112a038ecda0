//! Change detection for geometrically misaligned bitemporal imagery.
//!
//! The pipeline has three stages: self-supervised pre-training of a small
//! convolutional encoder with an alignment head, descriptor-based perspective
//! calibration that warps the follow-up image into the reference frame, and
//! change-detection fine-tuning of a decoder on top of the frozen encoder.

pub mod align;
pub mod autodiff;
pub mod cd;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretext;
pub mod raster;
pub mod scalar;
pub mod scenario;

pub use error::{CdError, CdResult};
pub use scalar::Scalar;

/// Single-precision raster, the default for model inputs.
pub type Raster32 = raster::Raster<f32>;
/// Double-precision raster for geometry-heavy tests.
pub type Raster64 = raster::Raster<f64>;
/// Single-precision homography.
pub type Homography32 = raster::Homography<f32>;
/// Double-precision homography, the default for geometric estimation.
pub type Homography64 = raster::Homography<f64>;
/// Single-precision tensor, the default for model compute.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Double-precision tensor for numerics-sensitive tests.
pub type Tensor64 = autodiff::Tensor<f64>;
