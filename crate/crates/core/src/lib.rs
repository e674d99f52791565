//! A numerical laboratory for inverse correlations between in-distribution (ID)
//! and out-of-distribution (OOD) performance.
//!
//! The crate is organised bottom-up:
//!
//! - [`sem`]: the linear structural-equation data generator with invariant and
//!   spurious features, and shift families between environments.
//! - [`oracle`]: closed-form population moments, empirical moments, optimal
//!   least-squares fits, risks, and symmetric eigendecompositions.
//! - [`theorem`]: certificates for the "add one spurious feature" trade-off,
//!   including the Q1/Q2/Q3 decomposition and the sufficient instability
//!   threshold.
//! - [`trainer`]: two-logit linear heads trained with ERM or jointly with an
//!   input-gradient diversity penalty.
//! - [`landscape`]: ID/OOD scatter pattern classification, model-selection
//!   bias reports and shift-magnitude sweeps.
//! - [`plot`]: deterministic SVG emitters for the figures.
//! - [`cli`]: experiment configs and the `misspec` command implementations.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod error;
pub mod landscape;
pub mod oracle;
pub mod plot;
pub mod sem;
pub mod theorem;
pub mod trainer;

mod seed;

pub use error::{Error, Result};
