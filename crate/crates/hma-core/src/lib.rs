//! Hierarchical pooling of correlated endpoint effects across cohorts.
//!
//! The pipeline has three stages. Stage one regresses each endpoint on an
//! exposure and an adjustment covariate within a cohort and assembles the
//! joint covariance of the exposure coefficients, adjusted for
//! endpoint-wise missingness. Stage two pools those correlated effects
//! into one effect per cohort with a heterogeneity variance. Stage three
//! pools the cohort effects into a global estimate. A one-stage mixed
//! model over the stacked individual-level data is included as a
//! comparator, along with a simulation harness that measures bias,
//! average and empirical standard errors, and coverage for both routes.
//!
//! The `parallel` feature (on by default) runs per-endpoint fits and
//! simulation replicates on a rayon pool; sequential equivalents are
//! always compiled and produce identical results.

pub mod data;
pub mod error;
pub mod forest;
pub mod linalg;
pub mod onestage;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sim;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod synthetic;

pub use error::{Error, Result};
