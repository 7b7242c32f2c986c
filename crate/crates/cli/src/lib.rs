//! Experiment harness: declarative configs, repetitions, sweeps, ablations
//! and the distance report.

pub mod config;
pub mod experiment;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("missing checkpoint {0}; run the experiment first")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Data(#[from] advrw::data::DataError),
    #[error(transparent)]
    Train(#[from] advrw::adversarial::AdvError),
    #[error(transparent)]
    Metrics(#[from] advrw::metrics::MetricsError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
