//! Cost-sensitive multi-class positive-unlabeled (MPU) learning toolkit.
//!
//! The pieces fit together as follows: [`surrogate`] provides constant-sum
//! binary base losses; [`risk`] builds the unbiased cost-sensitive risk, its
//! non-negativity-corrected variants, and baseline estimators on top of them;
//! [`model`] supplies differentiable scorers; [`data`] constructs MPU
//! datasets (synthetic, CSV, IDX) under the observed/unlabeled split
//! protocol; [`prior`] estimates class priors from margins; [`train`] runs
//! the optimization loop, metrics, and diagnostics. The `csmpu` binary wires
//! everything into a command-line surface.

pub mod data;
pub mod error;
pub mod model;
pub mod prior;
pub mod report;
pub mod risk;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
