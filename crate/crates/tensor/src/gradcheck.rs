//! Central finite-difference gradient oracle.

use crate::{Result, Tensor, TensorError};

/// Default finite-difference step.
pub const DEFAULT_STEP: f32 = 1e-3;

/// Central-difference gradient of `f` at `x`.
///
/// `f` returns `f64` so callers can evaluate in higher precision when the
/// f32 round-off of their forward pass would swamp the difference. The
/// divisor is the step actually realised in f32, not the nominal `2h`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_grad",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let (plus, minus) = (orig + h, orig - h);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.push(((fp - fm) / (plus as f64 - minus as f64)) as f32);
    }
    Tensor::new(x.shape(), grad)
}

/// Outcome of an elementwise analytic-vs-numeric comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - n| / max(|a|, |n|)` over elements outside the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Index of the first element violating the tolerance, if any.
    pub first_failure: Option<usize>,
}

impl GradComparison {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Elementwise check: each element passes when its absolute error is within
/// `abs_floor` or its relative error is within `rel_tol`.
pub fn compare_gradients(
    analytic: &[f32],
    numeric: &[f32],
    rel_tol: f64,
    abs_floor: f64,
) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut out = GradComparison {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        first_failure: None,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let (a, n) = (a as f64, n as f64);
        let abs = (a - n).abs();
        out.max_abs_err = out.max_abs_err.max(abs);
        if abs <= abs_floor {
            continue;
        }
        let rel = abs / a.abs().max(n.abs());
        out.max_rel_err = out.max_rel_err.max(rel);
        if rel > rel_tol && out.first_failure.is_none() {
            out.first_failure = Some(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| (t.data()[0] as f64).powi(2), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_difference_grad(|_| 4.2, &x, DEFAULT_STEP).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let err = finite_difference_grad(|_| f64::NAN, &x, DEFAULT_STEP).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_difference_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn comparison_uses_floor_and_relative_tolerance() {
        let cmp = compare_gradients(&[1.0, 1e-6, 2.0], &[1.0005, 5e-6, 2.0], 1e-3, 1e-5);
        assert!(cmp.passed());
        let cmp = compare_gradients(&[1.0, 0.1], &[1.0, 0.11], 1e-3, 1e-5);
        assert_eq!(cmp.first_failure, Some(1));
    }
}
