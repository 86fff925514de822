//! Experiment orchestration for `mmvm-core`: configuration, the latent-probe
//! and label-sweep pipelines, generation demos, and CSV reporting.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
