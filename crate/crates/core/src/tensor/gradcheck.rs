//! Central finite-difference checks of [`Graph::backward`].

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Denominator floor for relative errors, so that entries whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Checks every element of `x`. `f` builds a scalar from the input leaf.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.data().len()).collect();
    grad_check_indices(f, x, &all, eps, tol)
}

/// Like [`grad_check`] but perturbs only the listed elements.
pub fn grad_check_indices<F>(f: F, x: &Tensor<f64>, indices: &[usize], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |data: Vec<f64>, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.dims(), data, true)?;
        let out = f(&mut g, leaf)?;
        if g.dims(out).len() != 1 {
            return Err(Error::Shape(format!("grad_check needs a scalar, got {}", g.dims(out))));
        }
        let value = g.value(out)[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteValue("grad_check objective".into()));
        }
        let grad = if want_grad {
            let mut grads = g.backward(out)?;
            Some(grads.take(leaf).unwrap_or_else(|| vec![0.0; x.data().len()]))
        } else {
            None
        };
        Ok((value, grad))
    };

    let analytic = eval(x.data().to_vec(), true)?.1.expect("gradient requested");
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("analytic gradient at element {i}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        checked: 0,
        passed: true,
    };
    for &i in indices {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus, false)?.0 - eval(minus, false)?.0) / (2.0 * eps);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn sample(dims: Dims) -> Tensor<f64> {
        Tensor::from_fn(dims, |i| ((i as f64 * 1.618).sin() * 2.0).round() / 2.0 + 0.1 * i as f64)
    }

    #[test]
    fn sum_is_exact() {
        let x = sample(Dims::cube(1, 1, 3));
        let r = grad_check(|g, v| g.sum(v), &x, 1e-3, 1e-9).unwrap();
        assert!(r.passed);
        assert!(r.max_abs_error < 1e-9);
        assert_eq!(r.checked, 27);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let x = sample(Dims::new(1, 2, 2, 2, 2));
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly zero has a kink; the check sees the mismatch
        let x = Tensor::new(Dims::scalar(), vec![0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let r = g.relu(v)?;
                g.sum(r)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
