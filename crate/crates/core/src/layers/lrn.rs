//! Local response normalization across channels.
//!
//! `y[n,c,h,w] = x[n,c,h,w] / (k + (alpha/local_size) * S)^beta` where `S`
//! sums `x^2` over channels within `local_size/2` of `c`, clipped at the
//! channel boundaries. With `alpha = 0, k = 1` the layer is exactly the
//! identity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::dims4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub local_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams { local_size: 5, alpha: 1e-4, beta: 0.75, k: 1.0 }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<()> {
        if self.local_size == 0 || self.local_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "lrn: local_size must be odd and positive, got {}",
                self.local_size
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(format!("lrn: alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("lrn: beta must be > 0, got {}", self.beta)));
        }
        if !(self.k > 0.0) {
            return Err(Error::invalid(format!("lrn: k must be > 0, got {}", self.k)));
        }
        Ok(())
    }

    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let r = self.local_size / 2;
        (c.saturating_sub(r), (c + r).min(channels - 1))
    }
}

/// Denominator bases `k + (alpha/n)*S_c` for one spatial position, channels
/// ascending. Prefix sums of squares keep this O(C) per position.
fn denom_bases(xs: &[f64], p: &LrnParams, out: &mut [f64]) {
    let channels = xs.len();
    let scale = p.alpha / p.local_size as f64;
    let mut prefix = vec![0.0; channels + 1];
    for (c, &v) in xs.iter().enumerate() {
        prefix[c + 1] = prefix[c] + v * v;
    }
    for c in 0..channels {
        let (lo, hi) = p.window(c, channels);
        out[c] = p.k + scale * (prefix[hi + 1] - prefix[lo]);
    }
}

pub fn lrn_forward(x: &Tensor, p: &LrnParams) -> Result<Tensor> {
    p.validate()?;
    let (n, c, h, w) = dims4(x, "lrn_forward")?;
    let hw = h * w;
    let mut y = x.clone();
    let mut xs = vec![0.0; c];
    let mut d = vec![0.0; c];
    for img in 0..n {
        let base = img * c * hw;
        for pos in 0..hw {
            for ch in 0..c {
                xs[ch] = x.data()[base + ch * hw + pos];
            }
            denom_bases(&xs, p, &mut d);
            for ch in 0..c {
                y.data_mut()[base + ch * hw + pos] = xs[ch] / d[ch].powf(p.beta);
            }
        }
    }
    Ok(y)
}

/// Gradient w.r.t. the input. With `D_c = k + (alpha/n)*S_c`:
/// `grad_in[c] = g_c * D_c^(-beta)
///             - 2*beta*(alpha/n) * x_c * sum_{l in window(c)} g_l * x_l * D_l^(-beta-1)`
/// (the window relation is symmetric, so the sum runs over the same window).
pub fn lrn_backward(x: &Tensor, p: &LrnParams, grad_out: &Tensor) -> Result<Tensor> {
    p.validate()?;
    let (n, c, h, w) = dims4(x, "lrn_backward")?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(format!(
            "lrn_backward: grad_out shape {} does not match input {}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let scale = p.alpha / p.local_size as f64;
    let mut grad_in = x.clone();
    let mut xs = vec![0.0; c];
    let mut gs = vec![0.0; c];
    let mut d = vec![0.0; c];
    let mut t_prefix = vec![0.0; c + 1];
    for img in 0..n {
        let base = img * c * hw;
        for pos in 0..hw {
            for ch in 0..c {
                xs[ch] = x.data()[base + ch * hw + pos];
                gs[ch] = grad_out.data()[base + ch * hw + pos];
            }
            denom_bases(&xs, p, &mut d);
            for ch in 0..c {
                let t = gs[ch] * xs[ch] * d[ch].powf(-p.beta - 1.0);
                t_prefix[ch + 1] = t_prefix[ch] + t;
            }
            for ch in 0..c {
                let (lo, hi) = p.window(ch, c);
                let cross = t_prefix[hi + 1] - t_prefix[lo];
                grad_in.data_mut()[base + ch * hw + pos] =
                    gs[ch] * d[ch].powf(-p.beta) - 2.0 * p.beta * scale * xs[ch] * cross;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{Dist, Shape};

    fn nchw(n: usize, c: usize, h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec(), Shape::new(&[n, c, h, w]).unwrap()).unwrap()
    }

    #[test]
    fn single_channel_unit_input_oracle() {
        // Defaults, C = 1, x = 1: y = 1 / (1 + (1e-4/5))^0.75.
        let x = nchw(1, 1, 1, 1, &[1.0]);
        let y = lrn_forward(&x, &LrnParams::default()).unwrap();
        assert!((y.data()[0] - 0.999985000262).abs() < 1e-9, "{}", y.data()[0]);
    }

    #[test]
    fn alpha_zero_k_one_is_identity_exactly() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::random(
            Shape::new(&[2, 7, 3, 3]).unwrap(),
            Dist::Gaussian { mean: 0.0, std: 3.0 },
            &mut rng,
        );
        let p = LrnParams { alpha: 0.0, ..LrnParams::default() };
        let y = lrn_forward(&x, &p).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn preserves_sign() {
        let mut rng = SeededRng::new(6);
        let x = Tensor::random(
            Shape::new(&[1, 6, 4, 4]).unwrap(),
            Dist::Gaussian { mean: 0.0, std: 2.0 },
            &mut rng,
        );
        let y = lrn_forward(&x, &LrnParams::default()).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!(a * b >= 0.0);
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }

    #[test]
    fn matches_direct_window_evaluation() {
        // Independent per-element evaluation with an explicit window loop.
        let mut rng = SeededRng::new(15);
        let (n, c, h, w) = (2, 7, 2, 3);
        let x = Tensor::random(
            Shape::new(&[n, c, h, w]).unwrap(),
            Dist::Gaussian { mean: 0.0, std: 1.5 },
            &mut rng,
        );
        let p = LrnParams { local_size: 5, alpha: 3e-2, beta: 0.8, k: 1.3 };
        let y = lrn_forward(&x, &p).unwrap();
        let r = p.local_size / 2;
        let hw = h * w;
        for img in 0..n {
            for ch in 0..c {
                for pos in 0..hw {
                    let lo = ch.saturating_sub(r);
                    let hi = (ch + r).min(c - 1);
                    let mut s = 0.0;
                    for cc in lo..=hi {
                        let v = x.data()[(img * c + cc) * hw + pos];
                        s += v * v;
                    }
                    let denom = (p.k + p.alpha / p.local_size as f64 * s).powf(p.beta);
                    let want = x.data()[(img * c + ch) * hw + pos] / denom;
                    let got = y.data()[(img * c + ch) * hw + pos];
                    assert!((want - got).abs() < 1e-12, "{want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn strong_neighbors_suppress_output() {
        // Same center value, hotter neighborhood: smaller normalized output.
        let quiet = nchw(1, 3, 1, 1, &[0.0, 1.0, 0.0]);
        let loud = nchw(1, 3, 1, 1, &[10.0, 1.0, 10.0]);
        let p = LrnParams { alpha: 1.0, ..LrnParams::default() };
        let yq = lrn_forward(&quiet, &p).unwrap();
        let yl = lrn_forward(&loud, &p).unwrap();
        assert!(yl.data()[1] < yq.data()[1]);
    }

    #[test]
    fn rejects_bad_params() {
        let x = nchw(1, 1, 1, 1, &[1.0]);
        for p in [
            LrnParams { local_size: 4, ..LrnParams::default() },
            LrnParams { local_size: 0, ..LrnParams::default() },
            LrnParams { alpha: -0.1, ..LrnParams::default() },
            LrnParams { beta: 0.0, ..LrnParams::default() },
            LrnParams { k: 0.0, ..LrnParams::default() },
        ] {
            assert!(lrn_forward(&x, &p).is_err(), "{p:?} should be rejected");
        }
    }
}
