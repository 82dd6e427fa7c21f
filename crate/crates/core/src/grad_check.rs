//! Central finite-difference checks for hand-written backward passes.

use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error used by every check: `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the analytic gradient returned by `f` at `x` against central
/// differences over every entry of `x` and returns the largest relative error.
///
/// `f` maps a point to `(value, gradient)`; only the value is used at the
/// perturbed points.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, step, &all)
}

/// Same as [`finite_diff_check`] but only probes the listed flat indices.
/// Used for large parameter tensors where a full sweep is too slow.
pub fn finite_diff_check_at<F>(mut f: F, x: &Tensor, step: f64, indices: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(x)?;
    assert_eq!(analytic.shape(), x.shape(), "gradient shape must match input");
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 7.5]).unwrap();
        let err = finite_diff_check(|x| Ok((x.data().iter().map(|v| v * v).sum(), x.map(|v| 2.0 * v))), &x, 1e-5)
            .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(|x| Ok((x.data().iter().map(|v| v * v).sum(), x.map(|v| 3.0 * v))), &x, 1e-5)
            .unwrap();
        assert!(err > 0.4, "err = {err}");
    }
}
