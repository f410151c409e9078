use super::dense::DenseVec;
use crate::error::{Error, Result};

/// Compares an analytic gradient with central finite differences.
///
/// `f` returns the function value and its analytic gradient at the given
/// point. The result is `max_i |g[i] - fd[i]| / max(1, |fd[i]|)`.
pub fn grad_check<F>(mut f: F, theta: &DenseVec, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut point = theta.as_slice().to_vec();
    let (value, analytic) = f(&point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("f(theta) = {value}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape("grad_check", point.len(), analytic.len()));
    }

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let (plus, _) = f(&point)?;
        point[i] = orig - eps;
        let (minus, _) = f(&point)?;
        point[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("f near theta[{i}]")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let theta = DenseVec::new(vec![1.0]).unwrap();
        let err = grad_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &theta, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let theta = DenseVec::new(vec![1.0, 2.0]).unwrap();
        let err = grad_check(|x| Ok((x[0] * x[1], vec![x[1], 0.0])), &theta, 1e-5).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let theta = DenseVec::new(vec![1.0]).unwrap();
        assert!(grad_check(|_| Ok((0.0, vec![0.0])), &theta, 1e-2).is_err());
        assert!(matches!(
            grad_check(|_| Ok((f64::NAN, vec![0.0])), &theta, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
