//! 2D convolution (cross-correlation, no kernel flip) over NCHW tensors.
//!
//! Forward lowers each image to a column matrix (im2col) and runs one matrix
//! product per image, so the accumulation order is the fixed k-ascending
//! order of [`gemm_nn`]. Backward reuses the same lowering: the input
//! gradient is a transposed-weight product scattered back (col2im), and the
//! weight gradient is the output gradient times the transposed columns.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nn_acc, transpose2d, Shape, Tensor};

use super::{dims4, out_extent};

/// Convolution layer parameters. Weights are `[out, in, kh, kw]` row-major,
/// which is already the `[out, in*kh*kw]` matrix the lowered product needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        weights: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("conv: channel counts must be positive"));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv: kernel and stride must be at least 1"));
        }
        let want_w = [out_channels, in_channels, kernel.0, kernel.1];
        if weights.shape().dims() != want_w {
            return Err(Error::shape(format!(
                "conv: weight shape {} does not match [out, in, kh, kw] = {:?}",
                weights.shape(),
                want_w
            )));
        }
        if bias.shape().dims() != [out_channels] {
            return Err(Error::shape(format!(
                "conv: bias shape {} does not match [{out_channels}]",
                bias.shape()
            )));
        }
        Ok(ConvSpec { in_channels, out_channels, kernel, stride, pad, weights, bias })
    }

    /// Zero-initialized layer; the model builder fills weights afterwards.
    pub fn with_zero_params(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let weights = Tensor::new(Shape::new(&[out_channels, in_channels, kernel.0, kernel.1])?);
        let bias = Tensor::new(Shape::new(&[out_channels])?);
        ConvSpec::new(in_channels, out_channels, kernel, stride, pad, weights, bias)
    }

    /// Output spatial size for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.kernel.0, self.stride.0, self.pad.0, "conv")?;
        let ow = out_extent(w, self.kernel.1, self.stride.1, self.pad.1, "conv")?;
        Ok((oh, ow))
    }
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_in: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, spec: &ConvSpec, ctx: &str) -> Result<Geometry> {
    let (n, c, h, w) = dims4(x, ctx)?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "{ctx}: input has {c} channels, layer expects {}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.out_hw(h, w)?;
    Ok(Geometry { n, c, h, w, oh, ow })
}

/// Lower one image to columns: row `(c*kh + ky)*kw + kx`, column `oy*ow + ox`
/// holds `img[c, oy*sh - ph + ky, ox*sw - pw + kx]`, zero outside bounds.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ocols = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * ocols);
    let mut row = 0;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * ocols..(row + 1) * ocols];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[p..p + ow].fill(0.0);
                        p += ow;
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..iy as usize * w + w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        dst[p] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column gradient back to image layout (inverse of the
/// im2col gather; overlapping windows accumulate in ascending row order).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ocols = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let base = ch * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * ocols..(row + 1) * ocols];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        p += ow;
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + iy as usize * w + ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[n,o,i,j] = bias[o] + sum_{c,u,v} x[n,c, i*sh-ph+u, j*sw-pw+v] * w[o,c,u,v]`.
pub fn conv2d_forward(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(x, spec, "conv2d_forward")?;
    let krows = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let ocols = g.oh * g.ow;
    let oc = spec.out_channels;
    let mut cols = vec![0.0; krows * ocols];
    let mut out = vec![0.0; g.n * oc * ocols];
    let bias = spec.bias.data();
    for img in 0..g.n {
        im2col(
            &x.data()[img * g.c * g.h * g.w..(img + 1) * g.c * g.h * g.w],
            g.c,
            g.h,
            g.w,
            spec.kernel,
            spec.stride,
            spec.pad,
            g.oh,
            g.ow,
            &mut cols,
        );
        let dst = &mut out[img * oc * ocols..(img + 1) * oc * ocols];
        gemm_nn(oc, krows, ocols, spec.weights.data(), &cols, dst);
        for o in 0..oc {
            let b = bias[o];
            for v in &mut dst[o * ocols..(o + 1) * ocols] {
                *v += b;
            }
        }
    }
    Tensor::from_vec(out, Shape::new(&[g.n, oc, g.oh, g.ow])?)
}

/// Gradients w.r.t. input, weights, and bias. Batch contributions accumulate
/// in ascending image order.
pub fn conv2d_backward(x: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = geometry(x, spec, "conv2d_backward")?;
    let oc = spec.out_channels;
    let want = [g.n, oc, g.oh, g.ow];
    if grad_out.shape().dims() != want {
        return Err(Error::shape(format!(
            "conv2d_backward: grad_out shape {} does not match forward output {:?}",
            grad_out.shape(),
            want
        )));
    }
    let krows = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let ocols = g.oh * g.ow;
    let w_t = transpose2d(oc, krows, spec.weights.data());

    let mut cols = vec![0.0; krows * ocols];
    let mut cols_t = vec![0.0; ocols * krows];
    let mut dcols = vec![0.0; krows * ocols];
    let mut grad_w = vec![0.0; oc * krows];
    let mut grad_b = vec![0.0; oc];
    let mut grad_in = vec![0.0; g.n * g.c * g.h * g.w];

    for img in 0..g.n {
        let x_img = &x.data()[img * g.c * g.h * g.w..(img + 1) * g.c * g.h * g.w];
        let gy = &grad_out.data()[img * oc * ocols..(img + 1) * oc * ocols];
        im2col(x_img, g.c, g.h, g.w, spec.kernel, spec.stride, spec.pad, g.oh, g.ow, &mut cols);
        cols_t.copy_from_slice(&transpose2d(krows, ocols, &cols));
        gemm_nn_acc(oc, ocols, krows, gy, &cols_t, &mut grad_w);
        for o in 0..oc {
            let mut s = 0.0;
            for &v in &gy[o * ocols..(o + 1) * ocols] {
                s += v;
            }
            grad_b[o] += s;
        }
        gemm_nn(krows, oc, ocols, &w_t, gy, &mut dcols);
        col2im_add(
            &dcols,
            g.c,
            g.h,
            g.w,
            spec.kernel,
            spec.stride,
            spec.pad,
            g.oh,
            g.ow,
            &mut grad_in[img * g.c * g.h * g.w..(img + 1) * g.c * g.h * g.w],
        );
    }
    Ok(ConvGrads {
        grad_in: Tensor::from_vec(grad_in, x.shape().clone())?,
        grad_w: Tensor::from_vec(grad_w, spec.weights.shape().clone())?,
        grad_b: Tensor::from_vec(grad_b, spec.bias.shape().clone())?,
    })
}
