//! Dense f64 tensors with a fixed accumulation order.
//!
//! Every reduction in this module (matmul, reduce, sums) walks indices in
//! ascending order and accumulates left to right. That order is part of the
//! contract: rerunning the same program on the same inputs must produce
//! bit-identical floats, so no op is allowed to reassociate additions.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Tensor extent per axis. Rank 0 is a scalar with one element; zero-length
/// axes are rejected so every tensor holds at least one value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!(
                "zero-length axis in shape {:?}",
                dims
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Weight/value initialization distributions for [`Tensor::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

/// Reduction kinds for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor.
    pub fn new(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    /// Constant-filled tensor.
    pub fn full(shape: Shape, fill: f64) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![fill; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>, shape: Shape) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor filled by drawing from `dist` in row-major element order.
    pub fn random(shape: Shape, dist: Dist, rng: &mut SeededRng) -> Self {
        let n = shape.numel();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match dist {
                Dist::Uniform { lo, hi } => rng.uniform(lo, hi),
                Dist::Gaussian { mean, std } => rng.gaussian(mean, std),
            };
            data.push(v);
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(format!(
                "reshape {} -> {} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Errors if any element is NaN or infinite. Layers call this on outputs
    /// so numeric blowups surface with a location instead of propagating.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{context}: non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    fn zip_check(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_check(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_check(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_check(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise division. Any zero in the divisor is an error; silent
    /// infinities would only be caught much later by a finiteness check.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_check(other, "div")?;
        if let Some(i) = other.data.iter().position(|&b| b == 0.0) {
            return Err(Error::invalid(format!(
                "div: divisor is zero at flat index {i}"
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a / b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|a| a + s).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|a| a * s).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn div_scalar(&self, s: f64) -> Result<Tensor> {
        if s == 0.0 {
            return Err(Error::invalid("div_scalar: divisor is zero"));
        }
        Ok(self.mul_scalar(1.0 / s))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.rank() != 2 || other.shape.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul: expected rank-2 operands, got {} and {}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape.dims()[0], self.shape.dims()[1]);
        let (k2, n) = (other.shape.dims()[0], other.shape.dims()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions differ, {} vs {}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Tensor::from_vec(out, Shape::new(&[m, n])?)
    }

    /// Reduce along one axis, dropping it from the shape. Reducing a rank-1
    /// tensor yields a scalar. Sums accumulate in ascending index order.
    pub fn reduce(&self, axis: usize, kind: Reduce) -> Result<Tensor> {
        let dims = self.shape.dims();
        if axis >= dims.len() {
            return Err(Error::shape(format!(
                "reduce: axis {axis} out of range for shape {}",
                self.shape
            )));
        }
        let axis_len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let out_shape = if out_dims.is_empty() {
            Shape::scalar()
        } else {
            Shape::new(&out_dims)?
        };

        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let first = self.data[o * axis_len * inner + i];
                let mut acc = first;
                for a in 1..axis_len {
                    let v = self.data[(o * axis_len + a) * inner + i];
                    acc = match kind {
                        Reduce::Sum | Reduce::Mean => acc + v,
                        Reduce::Max => {
                            if v > acc {
                                v
                            } else {
                                acc
                            }
                        }
                    };
                }
                if kind == Reduce::Mean {
                    acc /= axis_len as f64;
                }
                out.push(acc);
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }
}

/// `out = a * b` for row-major `a` (m x k) and `b` (k x n).
///
/// Loop nest is i, then kk ascending, then j: each output row accumulates the
/// k terms in ascending-k order. All larger matrix products in the crate
/// funnel through this one function so the summation order is fixed in
/// exactly one place.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    gemm_nn_acc(m, k, n, a, b, out);
}

/// `out += a * b`, same operand layout and loop order as [`gemm_nn`].
pub fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

/// Transpose of a row-major `rows x cols` matrix.
pub fn transpose2d(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
