//! Causal price-sensitivity engine for insurance renewal pricing.
//!
//! The crate is organised along the modelling pipeline:
//!
//! * [`portfolio`]: policy records, CSV ingestion, outlier trimming, treatment
//!   grids and a seeded synthetic-portfolio generator.
//! * [`losses`]: value/gradient/hessian triples for the boosting engine.
//! * [`boosting`]: exact-greedy gradient-boosted decision trees (first- and
//!   second-order).
//! * [`propensity`]: discrete propensity scores, continuous generalized
//!   propensity scores and ASAM balance diagnostics.
//! * [`matching`]: nearest-score donor search, multiple imputation and Rubin's
//!   rule.
//! * [`response`]: pooled LASSO-logistic response models, quadratic and
//!   boosted dose-response models.
//! * [`optimizer`]: efficient frontiers, boundary solutions and multi-period
//!   renewal plans.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default) and fall back to plain iterators otherwise. Results
//! are identical either way.

// `!(x > 0.0)` guards also reject NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod boosting;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod matching;
pub mod optimizer;
pub mod portfolio;
pub mod propensity;
pub mod response;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
