//! Forecasting-aided state estimation for radial distribution networks.
//!
//! Injected bus currents are tracked as complex random-walk states by an
//! augmented complex Kalman filter; bus voltages follow from the direct load
//! flow. Large feeders are split into a main area and subareas that are
//! solved layer by layer.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod ackf;
pub mod augmented;
pub mod cli;
pub mod error;
pub mod grid_model;
pub mod layering;
pub mod linalg;
pub mod measurement;
pub mod metrics;
pub mod scalar;
pub mod synthetic;
pub mod wls;

pub use error::{DseError, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the CLI and the harness.
pub type Network = grid_model::RadialNetwork<f64>;
pub type Flow = grid_model::FlowSolution<f64>;
pub type Filter = ackf::AugmentedKalmanFilter<f64>;
pub type Run = layering::EstimationRun<f64>;

/// Single-precision instantiations.
pub type Network32 = grid_model::RadialNetwork<f32>;
pub type Flow32 = grid_model::FlowSolution<f32>;
pub type Filter32 = ackf::AugmentedKalmanFilter<f32>;
pub type Run32 = layering::EstimationRun<f32>;

/// Version stamped into every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn format_version() -> u32 {
    FORMAT_VERSION
}
