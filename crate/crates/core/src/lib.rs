//! Covariate-specific treatment effects in high-dimensional observational
//! studies.
//!
//! Propensity scores are fitted by regularized calibrated estimation,
//! outcome regressions by regularized weighted likelihood, and the two are
//! combined into augmented IPW values that are projected onto a basis of
//! the conditioning covariates. Competitor estimators (penalized maximum
//! likelihood, kernel smoothing) and a Monte Carlo lab live alongside.

pub mod cste;
pub mod data;
pub mod error;
pub mod kernels;
pub mod nuisance;
pub mod design;
pub mod optim;
pub mod simlab;
pub mod stats;

pub use data::{ColMatrix, Dataset};
pub use error::{Error, ErrorClass, Result};
