//! Acoustic feature predictors: a bidirectional-LSTM stack and a
//! convolutional stack, both mapping per-phone context to F0, energy and
//! log-duration in z-space.

mod batch;
mod checkpoint;
mod ensemble;
mod model;
mod train;

use std::path::Path;

use thiserror::Error;

use crate::numkernel::KernelError;

pub use batch::{sorted_batches, Batch, BucketSampler, Layout};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, AfpCheckpoint, TrainingMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use ensemble::{build_ensemble, Ensemble, EnsembleLabel};
pub use model::{
    param_manifest, AfpInput, AfpModel, Architecture, ModelDims, Parameters, CONV_BLOCKS, CONV_DROPOUT,
    CONV_FILTERS, CONV_KERNEL, FC_DIM, LSTM_DIMS, OUTPUT_DIM,
};
pub use train::{train, validation_loss, LossLogEntry, TrainConfig};

#[derive(Debug, Error)]
pub enum AfpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite output first seen after layer {layer}")]
    NonFiniteOutput { layer: String },
    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("ensemble composition: {0}")]
    Composition(String),
    #[error("parameter manifest mismatch: {0}")]
    Manifest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AfpError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AfpError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
