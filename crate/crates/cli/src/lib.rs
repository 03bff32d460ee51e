//! Config-driven pipeline: train a baseline, prune it into a pool, search
//! the pool by backward elimination, time it, and plot the trace.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod seeds;

pub use config::{EvalSplit, ExperimentConfig};
pub use pipeline::{run_pipeline, Layout, Summary};
pub use seeds::child_seed;

use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}
