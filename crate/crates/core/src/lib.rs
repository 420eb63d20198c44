//! Bayesian continual learning over a mean-field variational network.
//!
//! Prior-focused (VCL), likelihood-focused (variational generative replay)
//! and hybrid objectives share one Bayesian neural network, one training
//! loop and one evaluation harness so their behaviour can be compared
//! directly.

pub mod bnn;
pub mod coreset;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod replay;
pub mod rng;
pub mod snapshot;
pub mod tasks;
pub mod uncertainty;

pub use error::{Error, Result};
