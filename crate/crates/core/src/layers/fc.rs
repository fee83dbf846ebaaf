//! Fully connected layer: `y = x * W^T + bias` over a batch of row vectors.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, transpose2d, Shape, Tensor};

use super::dims2;

/// Weights are `[out, in]` row-major, one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FcSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcSpec {
    pub fn new(in_dim: usize, out_dim: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("fc: dimensions must be positive"));
        }
        if weights.shape().dims() != [out_dim, in_dim] {
            return Err(Error::shape(format!(
                "fc: weight shape {} does not match [{out_dim}, {in_dim}]",
                weights.shape()
            )));
        }
        if bias.shape().dims() != [out_dim] {
            return Err(Error::shape(format!(
                "fc: bias shape {} does not match [{out_dim}]",
                bias.shape()
            )));
        }
        Ok(FcSpec { in_dim, out_dim, weights, bias })
    }

    pub fn with_zero_params(in_dim: usize, out_dim: usize) -> Result<Self> {
        FcSpec::new(
            in_dim,
            out_dim,
            Tensor::new(Shape::new(&[out_dim, in_dim])?),
            Tensor::new(Shape::new(&[out_dim])?),
        )
    }
}

pub fn fc_forward(x: &Tensor, spec: &FcSpec) -> Result<Tensor> {
    let (n, d) = dims2(x, "fc_forward")?;
    if d != spec.in_dim {
        return Err(Error::shape(format!(
            "fc_forward: input width {d} does not match layer in_dim {}",
            spec.in_dim
        )));
    }
    let w_t = transpose2d(spec.out_dim, spec.in_dim, spec.weights.data());
    let mut y = vec![0.0; n * spec.out_dim];
    gemm_nn(n, spec.in_dim, spec.out_dim, x.data(), &w_t, &mut y);
    for row in 0..n {
        for (o, b) in spec.bias.data().iter().enumerate() {
            y[row * spec.out_dim + o] += b;
        }
    }
    Tensor::from_vec(y, Shape::new(&[n, spec.out_dim])?)
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub grad_in: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

pub fn fc_backward(x: &Tensor, spec: &FcSpec, grad_out: &Tensor) -> Result<FcGrads> {
    let (n, d) = dims2(x, "fc_backward")?;
    if d != spec.in_dim {
        return Err(Error::shape(format!(
            "fc_backward: input width {d} does not match layer in_dim {}",
            spec.in_dim
        )));
    }
    if grad_out.shape().dims() != [n, spec.out_dim] {
        return Err(Error::shape(format!(
            "fc_backward: grad_out shape {} does not match [{n}, {}]",
            grad_out.shape(),
            spec.out_dim
        )));
    }
    // grad_in = grad_out * W; grad_w = grad_out^T * x; grad_b = column sums.
    let mut grad_in = vec![0.0; n * spec.in_dim];
    gemm_nn(n, spec.out_dim, spec.in_dim, grad_out.data(), spec.weights.data(), &mut grad_in);
    let gy_t = transpose2d(n, spec.out_dim, grad_out.data());
    let mut grad_w = vec![0.0; spec.out_dim * spec.in_dim];
    gemm_nn(spec.out_dim, n, spec.in_dim, &gy_t, x.data(), &mut grad_w);
    let mut grad_b = vec![0.0; spec.out_dim];
    for row in 0..n {
        for o in 0..spec.out_dim {
            grad_b[o] += grad_out.data()[row * spec.out_dim + o];
        }
    }
    Ok(FcGrads {
        grad_in: Tensor::from_vec(grad_in, x.shape().clone())?,
        grad_w: Tensor::from_vec(grad_w, spec.weights.shape().clone())?,
        grad_b: Tensor::from_vec(grad_b, spec.bias.shape().clone())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec(), Shape::new(&[rows, cols]).unwrap()).unwrap()
    }

    fn identity_spec(dim: usize) -> FcSpec {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        FcSpec::new(dim, dim, t2(dim, dim, &w), Tensor::new(Shape::new(&[dim]).unwrap())).unwrap()
    }

    #[test]
    fn known_single_unit() {
        // 1*3 + 2*4 + 1 = 12.
        let spec = FcSpec::new(
            2,
            1,
            t2(1, 2, &[3.0, 4.0]),
            Tensor::from_vec(vec![1.0], Shape::new(&[1]).unwrap()).unwrap(),
        )
        .unwrap();
        let y = fc_forward(&t2(1, 2, &[1.0, 2.0]), &spec).unwrap();
        assert_eq!(y.data(), &[12.0]);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let x = t2(2, 3, &[1.5, -2.0, 0.25, 4.0, 5.0, -6.0]);
        let y = fc_forward(&x, &identity_spec(3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_yields_bias() {
        let spec = FcSpec::new(
            2,
            3,
            t2(3, 2, &[9.0; 6]),
            Tensor::from_vec(vec![1.0, 2.0, 3.0], Shape::new(&[3]).unwrap()).unwrap(),
        )
        .unwrap();
        let y = fc_forward(&t2(2, 2, &[0.0; 4]), &spec).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn dim_mismatch_errors() {
        let spec = FcSpec::with_zero_params(3, 2).unwrap();
        assert!(fc_forward(&t2(1, 4, &[0.0; 4]), &spec).is_err());
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let x = t2(2, 3, &[0.0; 6]);
        let gy = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = fc_backward(&x, &identity_spec(3), &gy).unwrap();
        assert_eq!(g.grad_in.data(), gy.data());
    }

    #[test]
    fn backward_known_values() {
        // y = x*Wt + b with W = [[3, 4]], x = [[1, 2]], grad_out = [[2]]:
        // grad_in = [[6, 8]], grad_w = [[2, 4]], grad_b = [2].
        let spec = FcSpec::new(
            2,
            1,
            t2(1, 2, &[3.0, 4.0]),
            Tensor::new(Shape::new(&[1]).unwrap()),
        )
        .unwrap();
        let g = fc_backward(&t2(1, 2, &[1.0, 2.0]), &spec, &t2(1, 1, &[2.0])).unwrap();
        assert_eq!(g.grad_in.data(), &[6.0, 8.0]);
        assert_eq!(g.grad_w.data(), &[2.0, 4.0]);
        assert_eq!(g.grad_b.data(), &[2.0]);
    }

    #[test]
    fn batch_gradients_accumulate_over_rows() {
        let spec = FcSpec::new(
            1,
            1,
            t2(1, 1, &[1.0]),
            Tensor::new(Shape::new(&[1]).unwrap()),
        )
        .unwrap();
        let g = fc_backward(
            &t2(3, 1, &[1.0, 2.0, 3.0]),
            &spec,
            &t2(3, 1, &[1.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(g.grad_w.data(), &[6.0]);
        assert_eq!(g.grad_b.data(), &[3.0]);
    }
}
