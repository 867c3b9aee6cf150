//! Multi-target distributional gradient boosting.
//!
//! Every parameter of a joint response distribution (multivariate Gaussian
//! with Cholesky or low-rank covariance, multivariate Student-T, Dirichlet)
//! is modelled as a function of covariates. Training grows one second-order
//! regression tree per distributional parameter per round, driven by
//! per-observation gradients and diagonal Hessians of the joint negative
//! log-likelihood with respect to the raw (pre-link) predictors.

pub mod boosting;
pub mod data;
pub mod diff;
pub mod eval;
pub mod distributions;
pub mod error;
pub mod linalg;
pub(crate) mod scalar;
pub(crate) mod seeds;

pub use error::{Error, Result};
