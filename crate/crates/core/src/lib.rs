//! Anomaly detection and install-attributed root-cause analysis for
//! microservice deployments.
//!
//! The pipeline watches per-pod telemetry through sliding windows scored by a
//! variational autoencoder ([`detector`]), fires an alert after `tau`
//! consecutive anomalous windows, restricts recent software installations
//! ([`sbom`]) to the services upstream or downstream of the alerting pod
//! ([`graph`]), and attributes the anomaly to the installation with the
//! strongest significant counterfactual effect ([`impact`]). A seeded
//! microservice simulator ([`simulator`]) produces every input format, and
//! [`eval`] drives the end-to-end experiments.

pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod impact;
pub mod pipeline;
pub mod rng;
pub mod sbom;
pub mod simulator;
pub mod telemetry;

pub use error::{Error, Result};
pub use exec::ExecMode;

/// Seconds since the epoch (simulated clocks start at 0).
pub type Timestamp = i64;
