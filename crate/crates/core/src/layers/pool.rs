//! Max and mean pooling over NCHW tensors.
//!
//! Windows tile each plane with the same floor arithmetic as convolution,
//! without padding. Max pooling resolves ties to the first element in
//! row-major window order, so the argmax cache (and therefore backward) is
//! deterministic even on plateaus.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{dims4, out_extent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolSpec {
    pub fn max(window: usize, stride: usize) -> Self {
        PoolSpec { kind: PoolKind::Max, window: (window, window), stride: (stride, stride) }
    }

    pub fn mean(window: usize, stride: usize) -> Self {
        PoolSpec { kind: PoolKind::Mean, window: (window, window), stride: (stride, stride) }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.window.0, self.stride.0, 0, "pool")?;
        let ow = out_extent(w, self.window.1, self.stride.1, 0, "pool")?;
        Ok((oh, ow))
    }
}

/// Forward bookkeeping for [`pool_backward`]. For max pooling, `argmax[i]`
/// is the flat input index that produced output element `i`; mean pooling
/// needs only the geometry.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub in_shape: Shape,
    argmax: Vec<usize>,
}

pub fn pool_forward(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, PoolCache)> {
    let (n, c, h, w) = dims4(x, "pool_forward")?;
    let (oh, ow) = spec.out_hw(h, w)?;
    let (wh, ww) = spec.window;
    let (sh, sw) = spec.stride;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    if spec.kind == PoolKind::Max {
        argmax.reserve(n * c * oh * ow);
    }
    let inv_area = 1.0 / (wh * ww) as f64;
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * sh;
                let x0 = ox * sw;
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let idx = (y0 + dy) * w + x0 + dx;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(plane * h * w + best_idx);
                    }
                    PoolKind::Mean => {
                        let mut acc = 0.0;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                acc += src[(y0 + dy) * w + x0 + dx];
                            }
                        }
                        out.push(acc * inv_area);
                    }
                }
            }
        }
    }
    let y = Tensor::from_vec(out, Shape::new(&[n, c, oh, ow])?)?;
    Ok((y, PoolCache { in_shape: x.shape().clone(), argmax }))
}

/// Max pooling routes each output gradient to its cached argmax; mean
/// pooling spreads it uniformly over the window.
pub fn pool_backward(spec: &PoolSpec, cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    let d = cache.in_shape.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (oh, ow) = spec.out_hw(h, w)?;
    if grad_out.shape().dims() != [n, c, oh, ow] {
        return Err(Error::shape(format!(
            "pool_backward: grad_out shape {} does not match forward output [{n}, {c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut grad_in = vec![0.0; cache.in_shape.numel()];
    match spec.kind {
        PoolKind::Max => {
            if cache.argmax.len() != grad_out.shape().numel() {
                return Err(Error::shape(
                    "pool_backward: cache does not match grad_out".to_string(),
                ));
            }
            for (g, &src) in grad_out.data().iter().zip(&cache.argmax) {
                grad_in[src] += g;
            }
        }
        PoolKind::Mean => {
            let (wh, ww) = spec.window;
            let (sh, sw) = spec.stride;
            let inv_area = 1.0 / (wh * ww) as f64;
            for plane in 0..n * c {
                let dst = &mut grad_in[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out.data()[(plane * oh + oy) * ow + ox] * inv_area;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                dst[(oy * sh + dy) * w + ox * sw + dx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(grad_in, cache.in_shape.clone())
}
