//! Tiny supervised-learning substrate: datasets, partitioning, models, local
//! SGD and evaluation. Sized so whole scenarios run in seconds.

mod dataset;
mod model;
mod partition;
mod train;

use thiserror::Error;

use crate::vector::VectorError;

pub use dataset::{load_small_image, BlobGenerator, BlobSpec, Dataset};
pub use model::{Architecture, Model};
pub use partition::{partition_dataset, PartitionSpec};
pub use train::{local_train, TrainParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid training parameters: {0}")]
    InvalidTraining(String),
    #[error("feature dimension mismatch: model expects {expected}, data has {actual}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("non-finite loss at local epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset file {path}: {reason}")]
    DatasetFile { path: String, reason: String },
    #[error(transparent)]
    Vector(#[from] VectorError),
}
