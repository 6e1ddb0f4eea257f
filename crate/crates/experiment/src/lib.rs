//! Runs the lane-change pipeline end to end: reference paths, Frenet
//! conversion, segmentation and features per population, then the
//! train-on-one, test-on-all protocol and its reports.

pub mod config;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod stages;

use std::path::Path;

use thiserror::Error;

use lcpred_core::Label;
use lcpred_model::ModelError;

pub use config::{ExperimentPlan, PipelineConfig, PopulationSpec};
pub use protocol::{AccuracyMatrix, MatrixCell};
pub use stages::Workspace;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing artifact {path} (produced by stage {producer})")]
    MissingArtifact { path: String, producer: &'static str },
    #[error("{stage}: {message}")]
    Data { stage: &'static str, message: String },
    #[error("population {population}: {available} {label} samples cannot be split at fraction {fraction}")]
    InsufficientClass { population: String, label: Label, available: usize, fraction: f64 },
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Short machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::MissingArtifact { .. } => "missing_artifact",
            Self::Data { .. } => "data",
            Self::InsufficientClass { .. } => "insufficient_class",
            Self::Model(_) => "model",
        }
    }
}
