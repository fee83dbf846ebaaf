//! Elementwise activations: sigmoid, tanh, ReLU.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Sigmoid,
    Tanh,
    Relu,
}

/// Branching on the sign keeps every exp argument non-positive, so large
/// inputs saturate to 0/1 instead of overflowing.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(x: &Tensor, kind: ActKind) -> Tensor {
    let mut y = x.clone();
    match kind {
        ActKind::Sigmoid => y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        ActKind::Tanh => y.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        ActKind::Relu => y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
    }
    y
}

/// Gradient w.r.t. the forward input. ReLU uses the zero subgradient at the
/// kink (grad 0 at x = 0).
pub fn activation_backward(x: &Tensor, kind: ActKind, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "activation_backward: input shape {} vs grad_out shape {}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let mut grad_in = grad_out.clone();
    for (g, &v) in grad_in.data_mut().iter_mut().zip(x.data()) {
        *g *= match kind {
            ActKind::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            ActKind::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            ActKind::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(grad_in)
}
