//! Bayes linear analysis of corrosion inspection data for multi-component systems.

pub mod bayes_linear;
pub mod calibration;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod forecast;
pub mod io;
pub mod pipeline;
pub mod simulator;
pub mod stats;
pub mod system;
pub mod variance_learning;

pub use error::{Error, Result};
