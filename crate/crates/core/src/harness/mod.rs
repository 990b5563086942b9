//! Training loops, metrics and evaluation reports.

mod eval;
mod metrics;
mod train;

pub use eval::{embedding_dump, evaluate, predict_records, EvalReport, Evaluator, PerClass, SamplePrediction};
pub use metrics::{auc, confusion, metrics, ClassMetrics, ConfusionCounts, Metrics};
pub use train::{
    bce_loss, component_outputs, fit, fit_fusion_head, train_fusion_head, train_network, TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::nets::NetError;
use crate::synthdata::SynthError;
use crate::tensor::{CheckpointError, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("unknown subset {0}")]
    UnknownSubset(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
