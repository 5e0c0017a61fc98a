//! Learned feature compression for edge-cloud image classification.
//!
//! The edge runs a patch-embedding encoder with a tunable number of residual
//! blocks and range-codes the quantized latent under a factorized prior; the
//! cloud decodes the feature, upsamples it to the classifier's input stride,
//! and classifies.

pub mod bench;
pub mod data;
pub mod edge;
pub mod entropy;
pub mod error;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
