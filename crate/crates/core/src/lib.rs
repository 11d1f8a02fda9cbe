//! Context-agnostic anomaly detection for DC line-flow measurements on a
//! grid whose topology changes over time.
//!
//! Flow snapshots taken under different topologies and load levels are mapped
//! onto a common baseline context before a weighted Gaussian model scores
//! them. See the crate README for the command-line front end.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod eval;
pub mod frames;
pub(crate) mod linalg;
pub mod mapping;
pub mod netmodel;
pub mod scengen;
pub mod sensitivity;
pub mod weighting;

pub use error::{Error, ErrorCategory, Result};
