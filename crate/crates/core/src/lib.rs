//! Desk-scale spatio-temporal fully convolutional segmentation.
//!
//! A from-scratch pipeline for semantic video segmentation: a small FCN
//! encoder produces a coarse grid of region descriptors per frame, a grid of
//! per-region LSTMs turns them into spatio-temporal descriptors over a short
//! window, and a transposed-convolution decoder maps per-region class scores
//! back to full-resolution label maps. Everything — tensors, layers,
//! backpropagation, the optimizer, metrics and the dataset tooling — is
//! implemented here in double precision with hand-written backward passes.

pub mod data;
pub mod error;
pub mod grid;
pub mod layers;
pub mod lstm;
pub mod metrics;
pub mod model;
pub(crate) mod pairdiff;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
