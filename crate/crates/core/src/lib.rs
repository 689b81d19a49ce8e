//! Bayesian calibration of forward models observed through deformed interface shapes.
//!
//! The pipeline runs a Sobol design of forward evaluations, fits a Gaussian
//! process surrogate of the log-likelihood and samples the posterior with an
//! adaptive-tempering sequential Monte Carlo sampler.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod discrepancy;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod likelihood;
pub mod parameter_space;
pub mod pipeline;
pub mod smc;
pub mod surrogate;

pub use error::{Error, Result};
