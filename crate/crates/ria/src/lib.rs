//! File formats, run directories and the command-line front end for
//! [`ria_core`].
//!
//! A training run writes everything under one output directory:
//!
//! ```text
//! out/
//!   config.json            full RunConfig, written before any work
//!   metrics.csv            one row per epoch, epoch 0 = untrained model
//!   trajectories.ndjson    one record per collected transition
//!   checkpoints/epoch_N.json
//! ```
//!
//! Evaluation adds `report.json`, `pca.csv` and `similarity.csv`; ablation
//! adds `ablation.csv` and one run directory per (method, seed).

pub mod checkpoint;
pub mod cli;
pub mod output;
pub mod run;

use std::path::PathBuf;

pub use checkpoint::Checkpoint;
pub use run::{RunConfig, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] ria_core::Error),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

impl RunError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Json { path, source }
    }

    /// Process exit code: 2 for usage, configuration and load problems, 3 for
    /// diverged training, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use ria_core::Error as E;
        match self {
            RunError::Core(E::Diverged(_)) => 3,
            RunError::Core(E::Config(_) | E::Usage(_) | E::Load(_)) => 2,
            RunError::MissingCheckpoint(_) | RunError::Json { .. } | RunError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Short machine-readable kind for the stderr error record.
    pub fn kind(&self) -> &'static str {
        use ria_core::Error as E;
        match self {
            RunError::Core(E::Diverged(_)) => "diverged",
            RunError::Core(E::Config(_)) => "config",
            RunError::Core(E::Usage(_)) | RunError::Usage(_) => "usage",
            RunError::Core(E::Load(_)) | RunError::Json { .. } => "load",
            RunError::Core(E::LabelLeak(_)) => "label_leak",
            RunError::MissingCheckpoint(_) => "missing_checkpoint",
            RunError::Io { .. } | RunError::Csv(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;
