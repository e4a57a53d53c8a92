//! Identification and estimation of proxy-SVARs whose error covariance
//! shifts permanently at a break date.
//!
//! The library works on the augmented system that stacks the VAR variables
//! and the external instruments. Which structural coefficients stay constant
//! across the two volatility regimes and which may move is declared through
//! restriction patterns; the induced moment conditions are solved by
//! classical minimum distance with a moving-block-bootstrap (or closed-form
//! Gaussian) weighting matrix. On top of the estimator sit regime-dependent
//! impulse responses with bootstrap bands, a covariance change-point
//! detector, and a Monte Carlo harness for the simulation designs used to
//! benchmark the approach.

pub mod cmd;
pub mod data;
pub mod error;
pub mod identification;
pub mod irf;
pub mod linalg;
mod lm;
pub mod montecarlo;
pub mod reduced_form;
pub mod restrictions;
pub mod rng;

pub use error::{Error, Result};
