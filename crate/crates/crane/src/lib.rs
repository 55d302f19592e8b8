//! Config-driven pipeline around `crane-core`: corpus generation, model
//! build and training, attribution, selection, intervention, transfer and
//! reporting, with resumable stages and a content-hashed manifest.

pub mod artifacts;
pub mod config;
pub mod stages;
pub mod verify;

pub use config::PipelineConfig;
pub use stages::{run_pipeline, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed for seed {seed}: {reason}")]
    Stage { stage: &'static str, seed: u64, reason: String },
    #[error("missing stage {stage} for seed {seed}: {path} not found (run `crane {stage}` first)")]
    Missing { stage: &'static str, seed: u64, path: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// Process exit code: 2 for configuration errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

impl From<crane_core::Error> for CliError {
    fn from(e: crane_core::Error) -> Self {
        match e {
            crane_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}
