//! Cubature Kalman filtering with adaptive fading factors and windowed
//! noise estimation, plus a range-bearing target-tracking benchmark.
//!
//! The crate is layered bottom-up:
//!
//! * [`cubature`]: the third-degree spherical-radial point rule and the
//!   covariance-form predict/update steps built on it.
//! * [`adaptive`]: sliding innovation/residual windows, the two fading
//!   factors, and windowed measurement/process noise estimates.
//! * [`models`]: the constant-velocity motion and range-bearing sensor pair
//!   used by the benchmark, with angle wrap-around handling.
//! * [`config`]: serde-backed run configuration with validation.
//! * [`sim`]: truth simulation, Monte Carlo driver, and RMSE summaries.

pub mod adaptive;
pub mod config;
pub mod cubature;
pub mod error;
pub mod models;
pub mod sim;

pub use adaptive::{
    AdaptiveCkf, AdaptiveState, EpochTelemetry, FadingConfig, FilterVariant, QStarEstimate,
    SlidingWindow,
};
pub use config::{RunConfig, ValidationError};
pub use cubature::{
    factor_psd, make_cubature_rule, CubatureRule, MeasurementPrediction, NoiseCovariances,
    Propagated, StateEstimate,
};
pub use error::FilterError;
pub use models::{wrap_angle, CaseId, InflationSchedule, NoiseCase, SystemModel};
pub use sim::{
    generate_truth, monte_carlo, reports_bit_identical, rmse, run_variant, RmseSeries, RunReport,
    TruthData, VariantReport, VariantRun,
};
