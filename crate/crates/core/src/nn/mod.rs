//! Tensors, layers and reverse-mode differentiation for the networks in
//! [`crate::scnet`].
//!
//! Activations are laid out `[batch, channels, length]`. Every kernel
//! accumulates in `f64` in a fixed order, so results are bit-identical across
//! runs and thread counts.

mod adam;
mod conv;
mod graph;
pub mod kernels;
mod layers;
mod lstm;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv1d_backward, conv1d_forward, ConvGeom};
pub use graph::{Gradients, Graph, Mode, NodeId};
pub use layers::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, dense_backward, dense_forward,
    pool_out_len, softmax_rows, softmax_xent, BnCache, BnStats, BN_EPS, BN_MOMENTUM,
};
pub use lstm::{lstm_backward, lstm_forward, LstmCache};
pub use params::{filled, glorot_uniform, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("receptive field of {span} samples exceeds padded input length {padded_len}")]
    ReceptiveFieldTooLarge { span: usize, padded_len: usize },
    #[error("pooling window {window} exceeds input length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("backward requested for a node that was not recorded in the forward pass")]
    GraphNotEvaluated,
    #[error("loss node must hold a single value, found shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("optimizer state does not match parameters: {0}")]
    ShapeMismatch(String),
}
