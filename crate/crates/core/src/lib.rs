//! Goodness-of-fit testing for generalized functional linear models.
//!
//! A scalar response is regressed on a curve through a penalized spline fit;
//! residuals are then tested against the leading functional principal component
//! scores with an angle-kernel U-statistic calibrated by bootstrap.

pub mod bootstrap;
pub mod error;
pub mod fpca;
pub mod funcdata;
pub mod gflm;
pub mod gof;
pub mod harness;
pub mod spline;

pub use error::{GofError, Result};
