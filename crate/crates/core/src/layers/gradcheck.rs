//! Finite-difference validation of every backward pass.
//!
//! Each check builds a random small layer configuration, defines the scalar
//! loss `L = sum(proj * forward(...))` for a fixed random projection (the
//! loss head uses its own cross-entropy scalar), and compares the analytic
//! gradient of every input and parameter element against the central
//! difference `(L(v+h) - L(v-h)) / 2h` with `h = 1e-5`. Inputs that would
//! sit on a kink (ReLU zeros, near-tied pooling windows, near-constant
//! batch-norm channels) are resampled, since no gradient convention matches
//! a finite difference straddling a kink.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{Dist, Shape, Tensor};

use super::activation::{activation_backward, activation_forward, ActKind};
use super::batchnorm::{batchnorm_backward, batchnorm_forward, BnParams};
use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::fc::{fc_backward, fc_forward, FcSpec};
use super::lrn::{lrn_backward, lrn_forward, LrnParams};
use super::pool::{pool_backward, pool_forward, PoolKind, PoolSpec};
use super::softmax::{softmax_cross_entropy, softmax_cross_entropy_backward};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    MeanPool,
    Sigmoid,
    Tanh,
    Relu,
    Lrn,
    BatchNorm,
    Fc,
    SoftmaxCe,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv,
        LayerKind::MaxPool,
        LayerKind::MeanPool,
        LayerKind::Sigmoid,
        LayerKind::Tanh,
        LayerKind::Relu,
        LayerKind::Lrn,
        LayerKind::BatchNorm,
        LayerKind::Fc,
        LayerKind::SoftmaxCe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::MeanPool => "meanpool",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Tanh => "tanh",
            LayerKind::Relu => "relu",
            LayerKind::Lrn => "lrn",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Fc => "fc",
            LayerKind::SoftmaxCe => "softmax_ce",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of a gradient-check sweep over one layer kind.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub layer: LayerKind,
    pub configs: usize,
    /// Total number of scalar gradient entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Central-difference sweep of one flat operand. Returns (worst relative
/// error, entries checked).
fn max_fd_err(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    base: &[f64],
    analytic: &[f64],
) -> Result<(f64, usize)> {
    debug_assert_eq!(base.len(), analytic.len());
    let mut buf = base.to_vec();
    let mut worst = 0.0;
    for i in 0..base.len() {
        buf[i] = base[i] + FD_STEP;
        let fp = f(&buf)?;
        buf[i] = base[i] - FD_STEP;
        let fm = f(&buf)?;
        buf[i] = base[i];
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        if e > worst {
            worst = e;
        }
    }
    Ok((worst, base.len()))
}

fn gauss(rng: &mut SeededRng, dims: &[usize], std: f64) -> Result<Tensor> {
    Ok(Tensor::random(Shape::new(dims)?, Dist::Gaussian { mean: 0.0, std }, rng))
}

struct Acc {
    worst: f64,
    checked: usize,
}

impl Acc {
    fn new() -> Self {
        Acc { worst: 0.0, checked: 0 }
    }

    fn push(&mut self, r: (f64, usize)) {
        if r.0 > self.worst {
            self.worst = r.0;
        }
        self.checked += r.1;
    }

    fn done(self) -> (f64, usize) {
        (self.worst, self.checked)
    }
}

fn check_conv(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(2) as usize;
    let c = 1 + rng.next_below(3) as usize;
    let oc = 1 + rng.next_below(3) as usize;
    let kernel = (1 + rng.next_below(3) as usize, 1 + rng.next_below(3) as usize);
    let stride = (1 + rng.next_below(2) as usize, 1 + rng.next_below(2) as usize);
    let pad = (rng.next_below(2) as usize, rng.next_below(2) as usize);
    let h = kernel.0 + rng.next_below(3) as usize;
    let w = kernel.1 + rng.next_below(3) as usize;

    let x = gauss(rng, &[n, c, h, w], 1.0)?;
    let weights = gauss(rng, &[oc, c, kernel.0, kernel.1], 0.7)?;
    let bias = gauss(rng, &[oc], 0.5)?;
    let spec = ConvSpec::new(c, oc, kernel, stride, pad, weights, bias)?;
    let y = conv2d_forward(&x, &spec)?;
    let proj = gauss(rng, y.shape().dims(), 1.0)?;
    let grads = conv2d_backward(&x, &spec, &proj)?;

    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let xt = Tensor::from_vec(d.to_vec(), x.shape().clone())?;
            Ok(dot(conv2d_forward(&xt, &spec)?.data(), proj.data()))
        },
        x.data(),
        grads.grad_in.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| {
            let mut s = spec.clone();
            s.weights = Tensor::from_vec(d.to_vec(), spec.weights.shape().clone())?;
            Ok(dot(conv2d_forward(&x, &s)?.data(), proj.data()))
        },
        spec.weights.data(),
        grads.grad_w.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| {
            let mut s = spec.clone();
            s.bias = Tensor::from_vec(d.to_vec(), spec.bias.shape().clone())?;
            Ok(dot(conv2d_forward(&x, &s)?.data(), proj.data()))
        },
        spec.bias.data(),
        grads.grad_b.data(),
    )?);
    Ok(acc.done())
}

/// True when some pooling window's two largest values are within `margin`
/// (a finite difference would straddle the argmax switch).
fn has_near_tie(x: &Tensor, spec: &PoolSpec, margin: f64) -> bool {
    let d = x.shape().dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (oh, ow) = spec.out_hw(h, w).unwrap();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for dy in 0..spec.window.0 {
                    for dx in 0..spec.window.1 {
                        let v = src[(oy * spec.stride.0 + dy) * w + ox * spec.stride.1 + dx];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if best - second < margin {
                    return true;
                }
            }
        }
    }
    false
}

fn check_pool(rng: &mut SeededRng, kind: PoolKind) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(2) as usize;
    let c = 1 + rng.next_below(3) as usize;
    let window = (1 + rng.next_below(3) as usize, 1 + rng.next_below(3) as usize);
    let stride = (1 + rng.next_below(2) as usize, 1 + rng.next_below(2) as usize);
    let h = window.0 + rng.next_below(4) as usize;
    let w = window.1 + rng.next_below(4) as usize;
    let spec = PoolSpec { kind, window, stride };

    let mut x = gauss(rng, &[n, c, h, w], 1.0)?;
    if kind == PoolKind::Max {
        let mut tries = 0;
        while has_near_tie(&x, &spec, 1e-3) {
            x = gauss(rng, &[n, c, h, w], 1.0)?;
            tries += 1;
            if tries > 1000 {
                return Err(Error::data("gradcheck: could not sample tie-free pool input"));
            }
        }
    }
    let (y, cache) = pool_forward(&x, &spec)?;
    let proj = gauss(rng, y.shape().dims(), 1.0)?;
    let grad_in = pool_backward(&spec, &cache, &proj)?;

    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let xt = Tensor::from_vec(d.to_vec(), x.shape().clone())?;
            let (yt, _) = pool_forward(&xt, &spec)?;
            Ok(dot(yt.data(), proj.data()))
        },
        x.data(),
        grad_in.data(),
    )?);
    Ok(acc.done())
}

fn check_activation(rng: &mut SeededRng, kind: ActKind) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(3) as usize;
    let len = 2 + rng.next_below(10) as usize;
    let mut x = gauss(rng, &[n, len], 1.5)?;
    if kind == ActKind::Relu {
        // Push every element off the kink.
        for v in x.data_mut() {
            while v.abs() < 1e-3 {
                *v = rng.gaussian(0.0, 1.5);
            }
        }
    }
    let y = activation_forward(&x, kind);
    let proj = gauss(rng, y.shape().dims(), 1.0)?;
    let grad_in = activation_backward(&x, kind, &proj)?;
    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let xt = Tensor::from_vec(d.to_vec(), x.shape().clone())?;
            Ok(dot(activation_forward(&xt, kind).data(), proj.data()))
        },
        x.data(),
        grad_in.data(),
    )?);
    Ok(acc.done())
}

fn check_lrn(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(2) as usize;
    let c = 1 + rng.next_below(6) as usize;
    let h = 1 + rng.next_below(3) as usize;
    let w = 1 + rng.next_below(3) as usize;
    let p = LrnParams {
        local_size: [1, 3, 5][rng.next_below(3) as usize],
        alpha: rng.uniform(0.0, 0.05),
        beta: rng.uniform(0.5, 1.2),
        k: rng.uniform(0.5, 2.0),
    };
    let x = gauss(rng, &[n, c, h, w], 1.0)?;
    let y = lrn_forward(&x, &p)?;
    let proj = gauss(rng, y.shape().dims(), 1.0)?;
    let grad_in = lrn_backward(&x, &p, &proj)?;
    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let xt = Tensor::from_vec(d.to_vec(), x.shape().clone())?;
            Ok(dot(lrn_forward(&xt, &p)?.data(), proj.data()))
        },
        x.data(),
        grad_in.data(),
    )?);
    Ok(acc.done())
}

/// Smallest per-channel batch variance of an NCHW tensor.
fn min_channel_var(x: &Tensor) -> f64 {
    let d = x.shape().dims();
    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
    let m = (n * hw) as f64;
    let mut worst = f64::INFINITY;
    for ch in 0..c {
        let mut sum = 0.0;
        for img in 0..n {
            for pos in 0..hw {
                sum += x.data()[(img * c + ch) * hw + pos];
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for img in 0..n {
            for pos in 0..hw {
                let v = x.data()[(img * c + ch) * hw + pos] - mean;
                sq += v * v;
            }
        }
        worst = worst.min(sq / m);
    }
    worst
}

fn check_batchnorm(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let n = 2 + rng.next_below(2) as usize;
    let c = 1 + rng.next_below(3) as usize;
    let h = 1 + rng.next_below(3) as usize;
    let w = 1 + rng.next_below(3) as usize;
    // A near-constant channel makes inv_std huge and the finite difference
    // ill-conditioned; keep a variance floor.
    let mut x = gauss(rng, &[n, c, h, w], 1.0)?;
    let mut tries = 0;
    while min_channel_var(&x) < 0.05 {
        x = gauss(rng, &[n, c, h, w], 1.0)?;
        tries += 1;
        if tries > 1000 {
            return Err(Error::data("gradcheck: could not sample spread-out bn input"));
        }
    }
    let mut p = BnParams::new(c)?;
    for g in p.gamma.data_mut() {
        *g = rng.uniform(0.5, 1.5);
    }
    for b in p.beta_shift.data_mut() {
        *b = rng.gaussian(0.0, 1.0);
    }
    let (y, cache) = batchnorm_forward(&x, &mut p.clone())?;
    let proj = gauss(rng, y.shape().dims(), 1.0)?;
    let grads = batchnorm_backward(&p, &cache, &proj)?;

    let loss = |xd: &[f64], gd: &[f64], bd: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(xd.to_vec(), x.shape().clone())?;
        let mut pt = p.clone();
        pt.gamma = Tensor::from_vec(gd.to_vec(), p.gamma.shape().clone())?;
        pt.beta_shift = Tensor::from_vec(bd.to_vec(), p.beta_shift.shape().clone())?;
        let (yt, _) = batchnorm_forward(&xt, &mut pt)?;
        Ok(dot(yt.data(), proj.data()))
    };
    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| loss(d, p.gamma.data(), p.beta_shift.data()),
        x.data(),
        grads.grad_in.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| loss(x.data(), d, p.beta_shift.data()),
        p.gamma.data(),
        grads.grad_gamma.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| loss(x.data(), p.gamma.data(), d),
        p.beta_shift.data(),
        grads.grad_beta.data(),
    )?);
    Ok(acc.done())
}

fn check_fc(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(3) as usize;
    let in_dim = 1 + rng.next_below(5) as usize;
    let out_dim = 1 + rng.next_below(5) as usize;
    let x = gauss(rng, &[n, in_dim], 1.0)?;
    let weights = gauss(rng, &[out_dim, in_dim], 0.8)?;
    let bias = gauss(rng, &[out_dim], 0.5)?;
    let spec = FcSpec::new(in_dim, out_dim, weights, bias)?;
    let proj = gauss(rng, &[n, out_dim], 1.0)?;
    let grads = fc_backward(&x, &spec, &proj)?;

    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let xt = Tensor::from_vec(d.to_vec(), x.shape().clone())?;
            Ok(dot(fc_forward(&xt, &spec)?.data(), proj.data()))
        },
        x.data(),
        grads.grad_in.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| {
            let mut s = spec.clone();
            s.weights = Tensor::from_vec(d.to_vec(), spec.weights.shape().clone())?;
            Ok(dot(fc_forward(&x, &s)?.data(), proj.data()))
        },
        spec.weights.data(),
        grads.grad_w.data(),
    )?);
    acc.push(max_fd_err(
        &mut |d| {
            let mut s = spec.clone();
            s.bias = Tensor::from_vec(d.to_vec(), spec.bias.shape().clone())?;
            Ok(dot(fc_forward(&x, &s)?.data(), proj.data()))
        },
        spec.bias.data(),
        grads.grad_b.data(),
    )?);
    Ok(acc.done())
}

fn check_softmax_ce(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let n = 1 + rng.next_below(4) as usize;
    let k = 2 + rng.next_below(4) as usize;
    let logits = gauss(rng, &[n, k], 2.0)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.next_below(k as u64) as usize).collect();
    let (_, probs) = softmax_cross_entropy(&logits, &labels)?;
    let grad = softmax_cross_entropy_backward(&probs, &labels)?;
    let mut acc = Acc::new();
    acc.push(max_fd_err(
        &mut |d| {
            let lt = Tensor::from_vec(d.to_vec(), logits.shape().clone())?;
            Ok(softmax_cross_entropy(&lt, &labels)?.0)
        },
        logits.data(),
        grad.data(),
    )?);
    Ok(acc.done())
}

fn check_one(kind: LayerKind, rng: &mut SeededRng) -> Result<(f64, usize)> {
    match kind {
        LayerKind::Conv => check_conv(rng),
        LayerKind::MaxPool => check_pool(rng, PoolKind::Max),
        LayerKind::MeanPool => check_pool(rng, PoolKind::Mean),
        LayerKind::Sigmoid => check_activation(rng, ActKind::Sigmoid),
        LayerKind::Tanh => check_activation(rng, ActKind::Tanh),
        LayerKind::Relu => check_activation(rng, ActKind::Relu),
        LayerKind::Lrn => check_lrn(rng),
        LayerKind::BatchNorm => check_batchnorm(rng),
        LayerKind::Fc => check_fc(rng),
        LayerKind::SoftmaxCe => check_softmax_ce(rng),
    }
}

/// Run `configs` random configurations of one layer kind, aggregating the
/// worst relative error. Configuration `i` is seeded from `(seed, i)`, so
/// a report is reproducible independently of all the others.
pub fn grad_check_suite(
    kind: LayerKind,
    configs: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    if configs == 0 {
        return Err(Error::invalid("grad_check_suite: configs must be positive"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("grad_check_suite: tolerance must be positive"));
    }
    let mut worst = 0.0;
    let mut checked = 0;
    for i in 0..configs {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let (e, n) = check_one(kind, &mut rng)?;
        if e > worst {
            worst = e;
        }
        checked += n;
    }
    Ok(GradReport {
        layer: kind,
        configs,
        checked,
        max_rel_err: worst,
        tolerance,
        pass: worst < tolerance,
    })
}

/// One report per layer kind.
pub fn grad_check_all(configs: usize, seed: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    LayerKind::ALL
        .iter()
        .map(|&k| grad_check_suite(k, configs, seed, tolerance))
        .collect()
}
