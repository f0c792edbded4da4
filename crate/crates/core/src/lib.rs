//! Planar missile-target interception laboratory.

pub mod dataset;
pub mod engagement;
pub mod error;
pub mod guidance;
pub mod maneuver;
pub mod par;
pub mod predictor;
pub mod qp;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
