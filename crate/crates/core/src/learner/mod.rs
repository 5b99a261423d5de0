//! Small supervised learner: synthetic Gaussian-blob data, a ReLU MLP trained
//! by mini-batch SGD, and accuracy / macro precision / macro recall.

mod codec;
mod data;
mod metrics;
mod mlp;

use thiserror::Error;

pub use codec::{deserialize_model, serialize_model, HEADER_LEN, MODEL_MAGIC, MODEL_VERSION};
pub use data::{
    class_means, generate_dataset, generate_holdout, partition_even, split_holdout, Dataset,
};
pub use metrics::{confusion_matrix, evaluate, metrics_from_predictions, Metrics};
pub use mlp::{
    argmax, dataset_loss, init_model, loss_and_gradient, param_count, softmax, train_local,
    train_local_observed, EpochReport, ModelState, TrainConfig,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LearnerError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("bad architecture: {0}")]
    BadArch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss became non-finite during epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("test set is empty")]
    EmptyTestset,
    #[error("corrupt model bytes: {0}")]
    CorruptModelBytes(&'static str),
}
