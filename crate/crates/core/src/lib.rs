//! Semantic segmentation on top of a frozen patch-token encoder.
//!
//! Pipeline: [`encoder`] (frozen) → [`encoder::Fuse`] → [`decoder`] →
//! [`rl`] residual refinement, trained with the curriculum-weighted hybrid
//! loss in [`losses`] by the [`trainer`], scored with [`metrics`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rl;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use mask::Mask;
pub use scalar::Scalar;
pub use tensor::Tensor;
