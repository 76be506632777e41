//! Layer primitives with hand-written forward and backward passes.
//!
//! Every image-like tensor is `[H, W, C]`. Batches are slices of such
//! tensors; only batch normalization looks across the batch.

mod activation;
mod conv;
mod dense;
pub mod gradcheck;
mod init;
mod lstm;
mod norm;
mod pool;
mod upsample;

pub use activation::{relu, relu_backward, sigmoid, softmax2, softmax2_backward};
pub use conv::{conv2d, conv2d_backward, Conv2d};
pub(crate) use conv::conv2d_backward_parts;
pub use dense::{dense, dense_backward, Dense};
pub use gradcheck::{all_indices, check_slots, grad_check, GradReport, Layer, Probe};
pub use init::glorot_uniform;
pub use lstm::{
    lstm_cell_backward, lstm_cell_forward, lstm_cell_step, lstm_sequence, lstm_sequence_backward, LstmCellCache,
    LstmCellState, LstmParams, LstmSequenceCache,
};
pub use norm::{
    batchnorm, batchnorm_backward, BatchNormCache, BatchNormParams, Mode, RunningStats,
    BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};
pub use upsample::{upsample_nearest, upsample_nearest_backward};

use crate::tensor::Tensor;

/// Gradients produced by one backward pass: one tensor per named
/// parameter (same shape as the parameter) plus the input gradient.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub params: Vec<(&'static str, Tensor)>,
    pub input: Tensor,
}

impl LayerGradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}
