//! Two-way time-of-arrival localization and synchronization.
//!
//! A user device (UD) sends one request that every anchor node (AN) timestamps,
//! then receives a response from each AN in turn. From those `2M` arrival
//! times this crate estimates the UD position `p`, velocity `v`, clock offset
//! `b` and clock drift `ω` at the request instant.
//!
//! The main estimator ([`estimator::estimate`]) is closed-form. It squares and
//! differences the arrival equations into a linear system in the state and two
//! auxiliary quadratic terms, solves the resulting pair of bivariate quadratics
//! analytically, picks the best candidate by weighted residual, and finishes
//! with a single weighted least-squares step. An undamped Gauss-Newton solver
//! ([`baseline::gauss_newton`]) is provided as the iterative reference.
//!
//! All time-valued quantities are stored pre-multiplied by the signal speed
//! [`SPEED_OF_LIGHT`], so offsets are in meters and drifts in meters/second.

pub mod analysis;
pub mod baseline;
pub mod estimator;
pub mod linear_system;
pub mod montecarlo;
pub mod polysolve;
pub mod scenario;

mod error;

pub use error::{LasError, Result};
pub use estimator::{estimate, EstimateReport, EstimatorOptions};
pub use scenario::{AnchorSet, MeasurementSet, NoiseSpec, UdState};

/// Signal propagation speed in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Converts a clock offset in seconds to meters.
pub fn seconds_to_meters(seconds: f64) -> f64 {
    seconds * SPEED_OF_LIGHT
}

/// Converts a clock drift in parts per million to meters/second.
pub fn ppm_to_mps(ppm: f64) -> f64 {
    ppm * 1e-6 * SPEED_OF_LIGHT
}

pub fn meters_to_seconds(meters: f64) -> f64 {
    meters / SPEED_OF_LIGHT
}

pub fn mps_to_ppm(mps: f64) -> f64 {
    mps / SPEED_OF_LIGHT * 1e6
}
