//! Row-wise softmax and mean cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::dims2;

fn check_labels(n: usize, k: usize, labels: &[usize], ctx: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{ctx}: {} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "{ctx}: label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Numerically stable softmax per row (row max subtracted before exp).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = dims2(logits, "softmax_rows")?;
    let mut out = vec![0.0; n * k];
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let dst = &mut out[row * k..(row + 1) * k];
        let mut mx = src[0];
        for &v in &src[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mx).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::from_vec(out, logits.shape().clone())
}

/// Mean negative log-likelihood of the labels under row-wise softmax.
///
/// The per-row loss is computed in log space, `ln(sum exp(x - max)) -
/// (x[label] - max)`, so it stays finite even where the probability itself
/// underflows. Returns the loss and the probabilities (for the backward
/// pass and for accuracy counting).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = dims2(logits, "softmax_cross_entropy")?;
    check_labels(n, k, labels, "softmax_cross_entropy")?;
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let src = &logits.data()[row * k..(row + 1) * k];
        let mut mx = src[0];
        for &v in &src[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for &v in src {
            sum += (v - mx).exp();
        }
        loss += sum.ln() - (src[label] - mx);
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean loss w.r.t. the logits: `(probs - onehot) / n`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = dims2(probs, "softmax_cross_entropy_backward")?;
    check_labels(n, k, labels, "softmax_cross_entropy_backward")?;
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; n * k];
    for (row, &label) in labels.iter().enumerate() {
        for col in 0..k {
            let onehot = if col == label { 1.0 } else { 0.0 };
            grad[row * k + col] = (probs.data()[row * k + col] - onehot) * inv_n;
        }
    }
    Tensor::from_vec(grad, Shape::new(&[n, k])?)
}
