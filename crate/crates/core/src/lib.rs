//! Hull-White scenario pricing with a reduced-order finite-difference engine.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod curve_sim;
pub mod error;
pub mod fdm;
pub mod greedy;
pub mod linalg;
pub mod market_data;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod rom;

pub use error::{Error, Result};
