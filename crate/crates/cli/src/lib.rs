//! Experiment runner for near-field EM source localization: configuration,
//! per-trial rows, aggregates and run manifests.

pub mod app;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

pub use error::{CliError, Result};
