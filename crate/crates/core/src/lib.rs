//! Probability-preserving prediction of extremes from small GPD samples.
//!
//! The pipeline: fit a tail shape to an ordered sample by curve fitting
//! ([`estimator`]), build a Monte Carlo cloud of (true shape, fitted
//! shape, next observation) triples ([`cloud`]), extract per-slice
//! calibrated shape increments ([`predictor`]), and measure the delivered
//! exceedance rates of the resulting predictions ([`validate`]).

pub mod cloud;
pub mod error;
pub mod estimator;
pub mod gpd;
pub mod kde;
pub mod predictor;
pub mod search;
pub mod validate;

pub use cloud::{CloudConfig, CloudPoint, CloudReader};
pub use error::{Error, Result};
pub use estimator::{fit_xi, OrderedSample, TailEstimate};
pub use gpd::GpdParams;
pub use predictor::{IncrementTable, SliceSpec};
