//! Differentially private Adam training for small binary classifiers.
//!
//! The pipeline: per-sample gradients from a reverse-mode tape ([`tape`],
//! [`model`]), per-sample L2 clipping and Gaussian noise ([`mechanisms`]),
//! Adam updates over Poisson-subsampled batches ([`optim`]), and Rényi-DP
//! accounting with `(ε, δ)` conversion ([`accountant`]). [`harness`] drives
//! whole training runs and privacy/utility sweeps.

pub mod accountant;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mechanisms;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradientSet, Tensor};
