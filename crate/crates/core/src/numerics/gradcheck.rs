use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `|a - n| / max(1, |a|, |n|)` at the worst coordinate.
    pub max_rel_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the analytic gradient returned by `loss_fn` at `params` against
/// central differences with step `eps`, one coordinate at a time.
///
/// `loss_fn` returns `(loss, gradient)`; only the loss is used at the
/// perturbed points.
pub fn grad_check<T, F>(mut loss_fn: F, params: &[T], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "grad_check",
            expected: vec![params.len()],
            actual: vec![analytic.len()],
        });
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        index: 0,
        analytic: analytic.first().map_or(0.0, |a| a.as_f64()),
        numeric: 0.0,
    };
    let step = T::lit(eps);
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (plus, _) = loss_fn(&probe)?;
        probe[i] = params[i] - step;
        let (minus, _) = loss_fn(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if i == 0 || rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_square(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()))
    }

    #[test]
    fn quadratic_closed_form() {
        let report = grad_check(half_square, &[1.0, 2.0], 1e-5).unwrap();
        assert!(report.passes(1e-9), "{report:?}");
        let (_, g) = half_square(&[1.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let corrupt = |x: &[f64]| {
            let (l, mut g) = half_square(x)?;
            g[2] += 0.1;
            Ok((l, g))
        };
        let report = grad_check(corrupt, &[1.0, -2.0, 0.5, 3.0], 1e-5).unwrap();
        assert_eq!(report.index, 2);
        assert!(!report.passes(1e-6));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let bad = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(grad_check(bad, &[1.0], 1e-5).is_err());
    }
}
