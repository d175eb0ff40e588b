//! Sliding-window visual-inertial-dynamics estimation for multirotors.
//!
//! The estimator fuses IMU, rotor-speed and landmark measurements to track
//! pose, velocity, IMU biases and the mass-normalized external force acting
//! on the vehicle. A built-in simulator provides ground truth.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod identify;
pub mod preint;
pub mod sim;

pub use error::{Error, Result};
