//! Computational core of a monocular 3D object detector.
//!
//! The crate bundles a minimal reverse-mode tensor engine, an attention plus
//! convolution feature aggregator, a scale-aware 3D regression head built on
//! modulated deformable convolution, the full training loss stack, KITTI
//! label/calibration/result file IO, and the rotated-IoU AP|R40 evaluation
//! protocol, together with a synthetic-scene toy detector that exercises the
//! whole pipeline end to end on a CPU.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]): f32 for
//! training and inference, f64 for gradient audits and equivalence checks.

pub mod asrh;
pub mod audit;
pub mod ehfam;
pub mod error;
pub mod eval;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{grad_check, GradReport};

/// Training/inference precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Audit precision (64-bit check mode).
pub type Tensor64 = tensor::Tensor<f64>;
