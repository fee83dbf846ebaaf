//! Layer forward/backward passes.
//!
//! Layers are pure functions: `(input, params) -> output` forward and
//! `(cache, grad_out) -> grads` backward, with no hidden state. The trainer
//! owns all parameter mutation between steps. Every backward pass is the
//! exact analytic gradient; [`gradcheck`] validates each one against central
//! finite differences.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod fc;
pub mod gradcheck;
pub mod lrn;
pub mod pool;
pub mod softmax;

pub use activation::{activation_backward, activation_forward, ActKind};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnGrads, BnMode, BnParams};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use fc::{fc_backward, fc_forward, FcGrads, FcSpec};
pub use gradcheck::{grad_check_suite, rel_err, GradReport, LayerKind};
pub use lrn::{lrn_backward, lrn_forward, LrnParams};
pub use pool::{pool_backward, pool_forward, PoolCache, PoolKind, PoolSpec};
pub use softmax::{softmax_cross_entropy, softmax_cross_entropy_backward, softmax_rows};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn dims4(x: &Tensor, ctx: &str) -> Result<(usize, usize, usize, usize)> {
    let d = x.shape().dims();
    if d.len() != 4 {
        return Err(Error::shape(format!(
            "{ctx}: expected a rank-4 [n, c, h, w] tensor, got {}",
            x.shape()
        )));
    }
    Ok((d[0], d[1], d[2], d[3]))
}

pub(crate) fn dims2(x: &Tensor, ctx: &str) -> Result<(usize, usize)> {
    let d = x.shape().dims();
    if d.len() != 2 {
        return Err(Error::shape(format!(
            "{ctx}: expected a rank-2 tensor, got {}",
            x.shape()
        )));
    }
    Ok((d[0], d[1]))
}

/// Output extent of one spatial axis: floor((in + 2*pad - window)/stride) + 1.
pub(crate) fn out_extent(input: usize, window: usize, stride: usize, pad: usize, ctx: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(format!("{ctx}: stride must be at least 1")));
    }
    if window == 0 {
        return Err(Error::invalid(format!("{ctx}: window must be at least 1")));
    }
    let padded = input + 2 * pad;
    if padded < window {
        return Err(Error::shape(format!(
            "{ctx}: window {window} larger than padded input {padded}"
        )));
    }
    Ok((padded - window) / stride + 1)
}
