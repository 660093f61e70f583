//! Gradient-inversion attack laboratory.
//!
//! Reconstructs a training image from a single captured gradient by matching
//! dummy gradients to the capture (deep leakage / iDLG), and measures how a
//! dropout layer between encoder and classifier degrades the reconstruction.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
