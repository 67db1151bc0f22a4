//! Multi-reference alignment with collision-free sparse signals: simulation,
//! moment-based and likelihood-based estimation, divergence bounds and an
//! experiment harness.

pub mod beltway;
pub mod error;
pub mod bounds;
pub mod config;
pub mod estimators;
pub mod harness;
pub mod hermite;
pub mod rng;
pub mod model;
pub mod moments;
pub mod report;
pub mod signal;

pub use error::{Error, Result};
