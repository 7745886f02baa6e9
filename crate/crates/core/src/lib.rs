//! Convolutional networks built from displaced aggregation units (DAUs).
//!
//! A DAU filter is a small mixture of fixed-width Gaussians placed at learned
//! sub-pixel displacements. This crate provides the layer (fast path,
//! explicit-filter oracle and gradients), the classic layers needed around
//! it, an SGD trainer, CIFAR-10 and checkpoint I/O, and the displacement and
//! pruning analyses.

pub mod analysis;
pub mod checkpoint;
pub mod classic;
pub mod config;
pub mod data;
pub mod dau;
pub mod error;
mod plane;
pub mod gaussian;
pub mod network;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
