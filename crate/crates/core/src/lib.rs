//! Tensor-structured Bayesian channel prediction for near-field, spatially
//! non-stationary XL-MIMO-OFDM links.

pub mod baselines;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod factors;
pub mod inference;
pub mod priors;
pub mod tensor;

pub use error::{Error, Result};
