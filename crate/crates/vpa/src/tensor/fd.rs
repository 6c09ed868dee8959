//! Central finite-difference gradient estimation.
//!
//! This is the gradient oracle: it evaluates the loss function directly and
//! never touches the tape, so it stays independent of the backward pass it
//! is used to check.

use crate::error::{Result, VpaError};
use crate::tensor::Tensor;

/// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / 2h per element.
pub fn finite_diff_gradient(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(VpaError::Param(format!("finite difference step must be > 0, got {h}")));
    }
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// l2 relative error between an analytic gradient and its oracle.
pub fn relative_error(analytic: &Tensor, oracle: &Tensor) -> f64 {
    let num: f64 =
        analytic.data.iter().zip(&oracle.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let den: f64 = oracle.data.iter().map(|b| b * b).sum::<f64>().max(1e-30);
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::new(vec![2, 2], vec![0.1, -0.5, 2.0, 1.5]).unwrap();
        let g = finite_diff_gradient(&|t: &Tensor| t.data.iter().sum(), &x, 1e-5).unwrap();
        for v in g.data {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_gradient_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(&|t: &Tensor| t.item() * t.item(), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_gradient(&|t: &Tensor| t.item(), &x, 0.0).is_err());
    }
}
