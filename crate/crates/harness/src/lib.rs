//! Experiment harness: task generation, source training, adaptation runs,
//! sweeps and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod steplog;
pub mod variant;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use variant::Variant;
