//! Finger-vein recognition pipeline.
//!
//! The crate covers the full chain from raw finger images to match
//! decisions: region-of-interest extraction, curvature-based vein soft
//! labels, a compact encoder-decoder segmentation network with its own
//! autodiff engine, skeleton keypoint detection, trainable patch
//! descriptors, two-stage matching with homography verification, and
//! dataset evaluation protocols with ROC/EER reporting.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The
//! pipeline runs in `f32`; the aliases at the crate root pin that choice.
//! The `f64` instantiation backs numerical verification such as
//! finite-difference gradient checks.

pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod keypatch;
pub mod matcher;
pub mod pipeline;
pub mod protocol;
pub mod roi;
pub mod scalar;
pub mod synth;
pub mod tensornet;
pub mod unet;
pub mod veinlabel;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the pipeline runs in.
pub type Real = f32;

/// Floating-point raster in the pipeline scalar type.
pub type ProbMap = imaging::ProbMap<Real>;

/// Dense array in the pipeline scalar type.
pub type Tensor = tensornet::Tensor<Real>;

/// Computation graph in the pipeline scalar type.
pub type Graph = tensornet::Graph<Real>;
