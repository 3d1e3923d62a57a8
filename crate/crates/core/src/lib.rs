//! Training and evaluation engine for the dynamically-biased LSTM (DB-LSTM).
//!
//! The DB-LSTM adds cell-state ("peephole") weights to every gate and feeds a
//! single shared bias scalar alongside the input, letting the input weights
//! learn per-gate biases. This crate provides:
//!
//! - [`numerics`]: dense matrices and activations
//! - [`dblstm`]: the cell, forecasting and classification forward passes
//! - [`backprop`]: BPTT for both heads, the update rule, and a finite-difference oracle
//! - [`quantize`]: per-matrix fixed-point weight ladders
//! - [`baseline`]: a conventional LSTM for comparisons
//! - [`signal`]: wavelet denoising, z-scoring, dataset builders, CSV loaders, synthetic ECG
//! - [`train`]: training loops, metrics, quantization sweeps and model comparisons
//! - [`persist`]: the JSON weight format

pub mod backprop;
pub mod baseline;
pub mod dblstm;
pub mod error;
pub mod numerics;
pub mod persist;
pub mod quantize;
pub mod signal;
pub mod train;

#[cfg(test)]
mod gradient_checks;
#[cfg(test)]
mod property_checks;
#[cfg(test)]
mod training_checks;

pub use dblstm::ModelDims;
pub use error::{Error, Result};
pub use numerics::Matrix;
