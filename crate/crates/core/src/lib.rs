//! Numerical laboratory for Transformer residual wirings.
//!
//! Builds Post-LN, Pre-LN and ResiDual (Pre-Post-LN) stacks with exact
//! reverse passes, and runs the experiments that probe their behaviour:
//! per-block gradient norms, representation deltas, Adam conditioning,
//! Gaussian collapse surrogates and a toy warm-up study.

pub mod adam;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod wiring;

pub use error::{LabError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
