//! Central finite differences, used as an independent check on the tape.

use crate::error::{Error, Result};
use crate::tensor::{GradientSet, Tensor};

/// Central-difference gradient `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every
/// coordinate of every parameter tensor.
///
/// At kinks (e.g. `|θ|` at 0) this returns the midpoint of the one-sided
/// slopes, not a true derivative.
pub fn fd_gradient<F>(loss: F, params: &[Tensor], step: f64) -> Result<GradientSet>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be > 0, got {step}"
        )));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grad = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = loss(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = loss(&work)?;
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(GradientSet::new(out))
}

/// Largest violation of `|a − b| ≤ rel·max(|a|, |b|)`, with an absolute
/// floor `abs` used for components whose reference magnitude is below
/// `small`. Returns 0 when every component passes.
pub fn gradient_mismatch(
    analytic: &GradientSet,
    reference: &GradientSet,
    rel: f64,
    abs: f64,
    small: f64,
) -> f64 {
    analytic
        .values()
        .zip(reference.values())
        .map(|(a, r)| {
            let diff = (a - r).abs();
            if r.abs() < small {
                (diff - abs).max(0.0)
            } else {
                (diff / r.abs().max(a.abs()) - rel).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let g = fd_gradient(|p| Ok(f(p[0].data()[0])), &[Tensor::scalar(x)], 1e-5).unwrap();
        g.tensors()[0].data()[0]
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        assert!((scalar_fd(|x| x * x, 3.0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn exp_at_zero_within_taylor_bound() {
        // remainder h²/6·max|f'''| ≈ 1.7e-11 plus rounding ~1e-11
        assert!((scalar_fd(f64::exp, 0.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn abs_at_kink_gives_midpoint() {
        assert_eq!(scalar_fd(f64::abs, 0.0), 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(fd_gradient(|_| Ok(0.0), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
