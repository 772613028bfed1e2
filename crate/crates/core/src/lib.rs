//! Operational accuracy assessment and improvement for a deployed classifier.
//!
//! A cheap invariant-based pseudo-oracle estimates accuracy online on every
//! operational batch; when that estimate degrades, a labeled sample yields a
//! corrected offline estimate and the labels are fed back into retraining.
//!
//! - [`dataset`]: MNIST IDX loading, splits, label-shifted operational stream
//! - [`model`]: the classifier under assessment
//! - [`oracle`]: domain / data / model invariants and Pass/Fail judging
//! - [`estimator`]: two-phase sampling and ratio estimation
//! - [`cycle`]: the per-cycle loop and experiment runner
//! - [`cli`]: configuration and result files

pub mod cli;
pub mod cycle;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
