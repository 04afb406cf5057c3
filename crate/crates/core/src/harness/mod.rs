//! Orchestration behind the command-line tool: run configuration, training,
//! evaluation sweeps, the gradient self-check and sweep reporting.
//!
//! Every entry point is a plain function returning [`HarnessError`]; the
//! binary only parses flags and maps errors to exit codes.

mod config;
mod eval;
mod gradcheck;
mod report;
mod train;

pub use config::{ModelHyper, RunConfig, SplitConfig, TrainConfig};
pub use eval::{
    check_model_fits, evaluate, parse_probs, read_sweep_csv, sweep, sweep_csv, write_sweep_csv, SweepResult,
    SWEEP_HEADER,
};
pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_TOLERANCE};
pub use report::{merge_reports, read_report_table, ReportTable};
pub use train::{prepare, train, EpochLog, PreparedData, TrainOutcome, LOG_HEADER};

use std::io;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::{CheckpointError, ModelError};
use crate::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config at '{path}': {message}")]
    Config { path: String, message: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// 1 for a failed check or a numerical failure, 2 for bad input,
    /// 3 for data whose widths disagree with the model.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::CheckFailed(_) | HarnessError::Metrics(_) | HarnessError::Tensor(_) => 1,
            HarnessError::DimensionMismatch(_) => 3,
            HarnessError::Model(ModelError::InputShape { .. }) => 3,
            HarnessError::Model(ModelError::Tensor(_)) => 1,
            _ => 2,
        }
    }
}
