//! Batch normalization over NCHW tensors.
//!
//! Train mode standardizes each channel over its mini-batch statistics (the
//! mean and the biased variance over all N*H*W positions), applies the
//! learned scale and shift, and folds the batch statistics into running
//! averages. Infer mode standardizes with the running statistics instead.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::dims4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    /// Learned per-channel scale (the algorithm's gamma).
    pub gamma: Tensor,
    /// Learned per-channel shift. Named to avoid clashing with the `beta`
    /// exponent used by the response-normalization layer.
    pub beta_shift: Tensor,
    pub epsilon: f64,
    pub mode: BnMode,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the old running value in the exponential average.
    pub momentum: f64,
}

impl BnParams {
    /// Identity-initialized layer: gamma 1, shift 0, running stats (0, 1).
    pub fn new(channels: usize) -> Result<Self> {
        let shape = Shape::new(&[channels])?;
        Ok(BnParams {
            gamma: Tensor::from_vec(vec![1.0; channels], shape.clone())?,
            beta_shift: Tensor::new(shape.clone()),
            epsilon: 1e-5,
            mode: BnMode::Train,
            running_mean: Tensor::new(shape.clone()),
            running_var: Tensor::from_vec(vec![1.0; channels], shape)?,
            momentum: 0.9,
        })
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta_shift", &self.beta_shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape().dims() != [channels] {
                return Err(Error::shape(format!(
                    "batchnorm: {name} shape {} does not match [{channels}]",
                    t.shape()
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "batchnorm: epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!(
                "batchnorm: momentum must be in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batchnorm: running_var must be non-negative"));
        }
        Ok(())
    }
}

/// Forward bookkeeping for [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    in_shape: Shape,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Train mode: per-channel standardization with batch statistics, then
/// `y = gamma * x_hat + shift`; running stats are updated in place as
/// `running = momentum * running + (1 - momentum) * batch`. Infer mode uses
/// the stored running statistics and mutates nothing.
pub fn batchnorm_forward(x: &Tensor, p: &mut BnParams) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = dims4(x, "batchnorm_forward")?;
    p.validate(c)?;
    let hw = h * w;
    let m = n * hw;
    if p.mode == BnMode::Train && m < 2 {
        return Err(Error::invalid(format!(
            "batchnorm: train mode needs at least 2 values per channel, got {m}"
        )));
    }
    let mut y = vec![0.0; x.shape().numel()];
    let mut x_hat = vec![0.0; x.shape().numel()];
    let mut inv_std_by_c = vec![0.0; c];
    for ch in 0..c {
        let (mean, var) = match p.mode {
            BnMode::Train => {
                let mut sum = 0.0;
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for pos in 0..hw {
                        sum += x.data()[base + pos];
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for pos in 0..hw {
                        let d = x.data()[base + pos] - mean;
                        sq += d * d;
                    }
                }
                (mean, sq / m as f64)
            }
            BnMode::Infer => (p.running_mean.data()[ch], p.running_var.data()[ch]),
        };
        let inv_std = 1.0 / (var + p.epsilon).sqrt();
        inv_std_by_c[ch] = inv_std;
        let g = p.gamma.data()[ch];
        let b = p.beta_shift.data()[ch];
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for pos in 0..hw {
                let xh = (x.data()[base + pos] - mean) * inv_std;
                x_hat[base + pos] = xh;
                y[base + pos] = g * xh + b;
            }
        }
        if p.mode == BnMode::Train {
            let mom = p.momentum;
            p.running_mean.data_mut()[ch] = mom * p.running_mean.data()[ch] + (1.0 - mom) * mean;
            p.running_var.data_mut()[ch] = mom * p.running_var.data()[ch] + (1.0 - mom) * var;
        }
    }
    let cache = BnCache {
        mode: p.mode,
        in_shape: x.shape().clone(),
        x_hat,
        inv_std: inv_std_by_c,
    };
    Ok((Tensor::from_vec(y, x.shape().clone())?, cache))
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub grad_in: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
}

/// Train-mode backward differentiates through the batch mean and variance:
/// `dx = inv_std/m * (m*dxh - sum(dxh) - x_hat*sum(dxh*x_hat))` per channel,
/// with `dxh = grad_out * gamma`. Infer-mode statistics are constants, so
/// there `dx = grad_out * gamma * inv_std`.
pub fn batchnorm_backward(p: &BnParams, cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    if grad_out.shape() != &cache.in_shape {
        return Err(Error::shape(format!(
            "batchnorm_backward: grad_out shape {} does not match input {}",
            grad_out.shape(),
            cache.in_shape
        )));
    }
    let d = cache.in_shape.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    p.validate(c)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut grad_in = vec![0.0; cache.in_shape.numel()];
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for pos in 0..hw {
                let g = grad_out.data()[base + pos];
                sum_g += g;
                sum_gx += g * cache.x_hat[base + pos];
            }
        }
        grad_beta[ch] = sum_g;
        grad_gamma[ch] = sum_gx;
        let gamma = p.gamma.data()[ch];
        let inv_std = cache.inv_std[ch];
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for pos in 0..hw {
                let g = grad_out.data()[base + pos];
                grad_in[base + pos] = match cache.mode {
                    BnMode::Train => {
                        let xh = cache.x_hat[base + pos];
                        gamma * inv_std / m * (m * g - sum_g - xh * sum_gx)
                    }
                    BnMode::Infer => g * gamma * inv_std,
                };
            }
        }
    }
    Ok(BnGrads {
        grad_in: Tensor::from_vec(grad_in, cache.in_shape.clone())?,
        grad_gamma: Tensor::from_vec(grad_gamma, p.gamma.shape().clone())?,
        grad_beta: Tensor::from_vec(grad_beta, p.beta_shift.shape().clone())?,
    })
}
