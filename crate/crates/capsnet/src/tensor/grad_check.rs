//! Central finite-difference verification of tape gradients.

use super::element::Element;
use super::shape::Shape;
use super::tape::{Tape, Tensor};
use crate::error::{bail, Result};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at every element of `x`.
///
/// Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Fails if any intermediate value or difference quotient is non-finite.
pub fn grad_check<E, F>(f: F, x: &[E], shape: &Shape, eps: E) -> Result<E>
where
    E: Element,
    F: Fn(&Tape<E>, &Tensor<E>) -> Result<Tensor<E>>,
{
    let eval = |data: Vec<E>| -> Result<E> {
        let tape = Tape::new();
        let xt = tape.var(data, shape.clone())?;
        let y = f(&tape, &xt)?;
        if y.numel() != 1 {
            bail!(InvalidArgument, "grad_check requires a scalar-valued function, got {}", y.shape());
        }
        let v = y.scalar_value();
        if !v.is_finite() {
            bail!(NonFinite, "grad_check: function value is not finite");
        }
        Ok(v)
    };

    // analytic gradient
    let tape = Tape::new();
    let xt = tape.var(x.to_vec(), shape.clone())?;
    let y = f(&tape, &xt)?;
    if y.numel() != 1 {
        bail!(InvalidArgument, "grad_check requires a scalar-valued function, got {}", y.shape());
    }
    if !y.scalar_value().is_finite() {
        bail!(NonFinite, "grad_check: function value is not finite");
    }
    tape.backward(&y)?;
    let analytic = xt.grad().unwrap_or_else(|| vec![E::zero(); x.len()]);
    if analytic.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "grad_check: analytic gradient contains non-finite entries");
    }

    let floor = E::from_f64(1e-8);
    let two = E::from_f64(2.0);
    let mut max_err = E::zero();
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] = plus[i] + eps;
        let mut minus = x.to_vec();
        minus[i] = minus[i] - eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        if !numeric.is_finite() {
            bail!(NonFinite, "grad_check: finite-difference quotient is not finite at element {i}");
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn sum_has_exact_gradient() {
        let x = vec![0.3f64, -1.2, 2.5, 0.0];
        let err = grad_check(|_, t| t.sum_all(), &x, &shape![4], 1e-4).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn softmax_pick_first() {
        let x = vec![0.1f64, 0.4, -0.7];
        let err = grad_check(
            |_, t| t.softmax_axis(0)?.slice_axis(0, 0, 1),
            &x,
            &shape![3],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn squash_near_zero_is_finite() {
        let x = vec![1e-7f64, -1e-7];
        let err = grad_check(|_, t| t.squash()?.sum_all(), &x, &shape![1, 2], 1e-9).unwrap();
        assert!(err.is_finite());
    }
}
