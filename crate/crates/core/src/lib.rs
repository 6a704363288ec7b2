//! Sparse high-dimensional linear regression with a covariate-dependent
//! residual variance.
//!
//! [`ecm::fit`] returns MAP estimates of the mean coefficients, inclusion
//! probabilities from plug-in empirical Bayes, and a log-linear variance model.
//! [`predict`] turns a fit into heteroscedastic prediction intervals and
//! [`sim`] runs the synthetic benchmark comparing against a constant-variance
//! fit.

pub mod cli;
pub mod diagnostics;
pub mod eb;
pub mod ecm;
pub mod error;
pub mod io;
pub mod model;
pub mod predict;
pub mod sim;
pub mod variance;

pub use ecm::fit;
pub use error::{Error, Result};
pub use model::{DataSet, FitConfig, FitResult, PriorConfig, RawData};
