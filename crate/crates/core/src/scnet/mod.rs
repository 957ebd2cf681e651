//! SCNet-family architectures, the CNN baseline, training and inference.
//!
//! A block runs `n_groups` parallel encoder groups on the same input. Each
//! group is three `conv -> batch norm -> ReLU` stages with "same" padding.
//! Group outputs are concatenated along channels, average-pooled by 2 and,
//! when the block has one, fed through an LSTM whose hidden sequence is the
//! block output. The last LSTM state (or the flattened features) feeds a
//! dense layer over the 256 classes.

mod arch;
mod model;
mod train;

pub use arch::{ArchSpec, BlockSpec, Layer, LayerOp, Variant, CNN_CHANNELS, CNN_HIDDEN, CNN_MIN_INPUT, N_CLASSES};
pub use model::{Model, Normalization, MODEL_MAGIC};
pub use train::{evaluate, train, train_with_progress, EpochRecord, History, LrSchedule, Normalize, TrainConfig};

use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum ScnetError {
    #[error("unknown architecture {0:?}; expected scnet, scnet_seq, cnn, ngroup:N or ngroup:N:lstm=J")]
    UnknownArch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input of {got} samples is too short; at least {needed} are required")]
    InputTooShort { needed: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("missing labels: {0}")]
    LabelMissing(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("malformed model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PartialEq for ScnetError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}
