use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `grad(θ)` against central differences of `loss(θ)`.
///
/// Each coordinate's error is `|a − n| / max(|a|, |n|, 1e-8)`; the maximum is
/// reported. The loss must be deterministic: it is evaluated twice at `θ` and
/// any difference aborts the check.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    eps: f64,
) -> Result<GradCheckReport> {
    let first = loss(theta);
    let second = loss(theta);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Numeric(format!(
            "loss is not deterministic: {first} then {second} at identical parameters"
        )));
    }
    let analytic = grad(theta);
    if analytic.len() != theta.len() {
        return Err(Error::dim("analytic gradient", theta.len(), analytic.len()));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for k in 0..theta.len() {
        probe[k] = theta[k] + eps;
        let plus = loss(&probe);
        probe[k] = theta[k] - eps;
        let minus = loss(&probe);
        probe[k] = theta[k];
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {k}")));
        }
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: k,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
