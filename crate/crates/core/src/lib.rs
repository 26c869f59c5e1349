//! Desk-scale laboratory for group-relative policy gradients.
//!
//! Small synthetic environments with verifiable rewards are enumerated
//! exactly, so every expectation the estimators target (values, gradients,
//! mean squared errors, covariances, Hessians) has an exact oracle. The
//! stochastic machinery (group sampling, the leave-one-out and normalized
//! estimators, training loops) is then measured against those oracles.

pub mod analysis;
pub mod env;
pub mod error;
pub mod grad;
pub mod landscape;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod ustat;

pub use error::{LabError, Result};
