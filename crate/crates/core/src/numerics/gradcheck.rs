//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::{GradResult, ParamVector};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the analytic gradient of `loss_fn` at `point` against central
/// differences coordinate by coordinate. Returns the worst relative error
/// `|analytic - fd| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(loss_fn: F, point: &ParamVector, step: f64) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<GradResult>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {step}"
        )));
    }

    let base = loss_fn(point)?;
    if !base.loss.is_finite() {
        return Err(Error::NonFinite("loss at the gradient-check point".into()));
    }
    if base.gradient.len() != point.len() {
        return Err(Error::ShapeMismatch {
            expected: point.len(),
            got: base.gradient.len(),
            context: "grad_check analytic gradient",
        });
    }

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.values().to_vec();
        plus[i] += step;
        let mut minus = point.values().to_vec();
        minus[i] -= step;

        let lp = loss_fn(&point.with_values(plus)?)?.loss;
        let lm = loss_fn(&point.with_values(minus)?)?.loss;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss probed at coordinate {i} during grad_check"
            )));
        }

        let fd = (lp - lm) / (2.0 * step);
        let analytic = base.gradient[i];
        let err = (analytic - fd).abs() / analytic.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
