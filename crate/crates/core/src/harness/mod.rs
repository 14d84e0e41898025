//! Two-stage training, the pretraining strategies, the center-weight sweep,
//! checkpoints and the finite-difference suite.

mod config;
mod gradsuite;
mod optim;
mod strategy;
mod train;

pub use config::{ClassMatrixLabels, Stage, TrainConfig};
pub use gradsuite::{gradient_suite, GradCase, SUITE_EPS, SUITE_TOLERANCE};
pub use optim::sgd_step;
pub use strategy::{
    run_pipeline, run_strategy, run_table1, strategy_stages, sweep_center_weight, PipelineReport, StrategyId,
    StrategyReport, SweepRow, DEFAULT_SWEEP_WEIGHTS, SWEEP_HEADER, sweep_csv,
};
pub use train::{
    evaluate, run_stage, sub_seed, Checkpoint, EvalRecord, EvalSet, PreparedData, StageOutcome, Trainer,
    CHECKPOINT_FORMAT, METRICS_HEADER,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::kv::KvError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::smiles::SmilesError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("checkpoint format {found:?} is not {CHECKPOINT_FORMAT:?}")]
    CheckpointFormat { found: String },
    #[error("checkpoint does not parse: {0}")]
    CheckpointParse(String),
    #[error("gradient for unknown parameter {0}")]
    UnknownGradient(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("sweep needs at least one weight")]
    EmptySweep,
    #[error("sweep weight {0} is negative or not finite")]
    InvalidWeight(f64),
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
