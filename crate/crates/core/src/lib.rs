//! Off-policy value estimation and confidence intervals for confounded
//! Markov decision processes with mediators.
//!
//! The crate provides, in dependency order:
//!
//! - [`model`]: tabular model specifications, policies, trajectories;
//! - [`sim`]: benchmark environments and trajectory simulation;
//! - [`features`]: random Fourier features and regularized linear fits;
//! - [`nuisance`]: estimated nuisance functions (behavior policy, mediator
//!   law, Q-function, marginal density ratio);
//! - [`estimate`]: the doubly-robust value estimator with Wald intervals,
//!   plus importance-sampling and unconfounded baselines;
//! - [`oracle`]: exact quantities for tabular models, for testing and truth;
//! - [`harness`]: replication experiments over (N, T) grids with metrics.

pub mod error;
pub mod estimate;
pub mod features;
pub mod harness;
pub mod math;
pub mod model;
pub mod nuisance;
pub mod oracle;
pub mod seeding;
pub mod sim;

pub use error::{CopeError, Result};
