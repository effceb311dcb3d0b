//! Dense tensors and the layer kernels a built graph executes: convolution
//! blocks, max pooling, linear layers, combine nodes, cross-entropy, and SGD.
//!
//! Every kernel comes as a forward/backward pair. Forward functions return a
//! cache holding whatever the backward pass needs.

mod combine;
mod conv;
mod linear;
mod loss;
mod optim;
mod pool;
mod tensor;

use thiserror::Error;

pub use combine::{combine_backward, combine_forward, CombineMode};
pub use conv::{
    conv2d_forward, conv_block_backward, conv_block_forward, conv_output_dim, same_padding,
    ConvBlockCache, ConvBlockGrads, ConvBlockParams, BN_EPS, BN_MOMENTUM,
};
pub use linear::{
    linear_backward, linear_forward, relu_backward, relu_forward, LinearGrads, LinearParams,
};
pub use loss::{argmax_rows, cross_entropy_loss};
pub use optim::{sgd_step, Parameter, SgdMomentum};
pub use pool::{maxpool_backward, maxpool_forward, MaxPoolCache};
pub use tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdtError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate shape: {0}")]
    Degenerate(String),
    #[error("merge incompatibility: {0}")]
    MergeIncompatible(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Learnable tensors of one node, by node kind.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Element = f32> {
    Conv(ConvBlockParams<T>),
    Linear(LinearParams<T>),
}

impl<T: Element> LayerParams<T> {
    /// Named tensors in a fixed order, including batch-norm buffers.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            LayerParams::Conv(p) => vec![
                ("weight", &p.weight),
                ("bias", &p.bias),
                ("gamma", &p.gamma),
                ("beta", &p.beta),
                ("running_mean", &p.running_mean),
                ("running_var", &p.running_var),
            ],
            LayerParams::Linear(p) => vec![("weight", &p.weight), ("bias", &p.bias)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            LayerParams::Conv(p) => vec![
                ("weight", &mut p.weight),
                ("bias", &mut p.bias),
                ("gamma", &mut p.gamma),
                ("beta", &mut p.beta),
                ("running_mean", &mut p.running_mean),
                ("running_var", &mut p.running_var),
            ],
            LayerParams::Linear(p) => vec![("weight", &mut p.weight), ("bias", &mut p.bias)],
        }
    }

    /// Number of learnable scalars (batch-norm running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        match self {
            LayerParams::Conv(p) => p.weight.len() + p.bias.len() + p.gamma.len() + p.beta.len(),
            LayerParams::Linear(p) => p.weight.len() + p.bias.len(),
        }
    }
}
