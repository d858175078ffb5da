//! Bucket-based covariance estimation for online controlled experiments.
//!
//! Users are hashed into `B` buckets independently of group diversion. Each
//! (group, metric, period) is reduced to `B` per-bucket sums and counts, and the
//! covariance between any two ratio metrics is estimated from those vectors
//! alone, without a user-level join. The crate also carries the baselines the
//! bucket estimator is compared against (naive intersection, data
//! augmentation), a Monte Carlo ground-truth oracle, and three consumers of the
//! estimator: CUPED, Bayes-factor continuous monitoring, and covariance-aware
//! Bayesian optimization.

pub mod bayesopt;
pub mod bench;
pub mod bucketstore;
pub mod config;
pub mod covest;
pub mod cuped;
pub mod diversion;
mod error;
pub mod linalg;
pub mod monitor;
pub mod rng;
pub mod simpop;
pub mod stats;

pub use error::{Error, Result};
