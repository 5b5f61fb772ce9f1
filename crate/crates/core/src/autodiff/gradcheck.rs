//! Central finite-difference gradient checking.

use super::{AutodiffError, Tape, Tensor, Var};

/// Denominator floor in the relative error `|a - n| / max(|a|, |n|, floor)`.
/// Below this magnitude the comparison is effectively absolute. A central
/// difference at step 1e-6 on an O(1) function carries ~1e-10 of roundoff, so
/// gradients smaller than 1e-5 cannot be resolved to 1e-5 relative accuracy.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// One evaluation of a scalar function.
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    /// Analytic gradient with respect to the probed tensor, when requested.
    pub grad: Option<Vec<f64>>,
    /// ReLU activation pattern of the evaluation; a change between the
    /// central point and a probe marks a kink crossing.
    pub relu_pattern: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index with the largest relative error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Elements skipped because a probe crossed a ReLU kink.
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `f`, a scalar-valued tape function of one tensor, at `x` over every
/// element.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let indices: Vec<usize> = (0..x.numel()).collect();
    grad_check_probe(|t, want_grad| probe_tape_fn(&f, t, want_grad), x, &indices, eps, tol)
}

fn probe_tape_fn<F>(f: &F, x: &Tensor, want_grad: bool) -> Result<Probe, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = f(&mut tape, xv)?;
    let yv = tape.value(y);
    if yv.numel() != 1 {
        return Err(AutodiffError::NonScalarLoss(yv.shape().to_vec()));
    }
    let value = yv.item();
    let grad = if want_grad {
        let g = tape.backward(y)?;
        Some(g.get_or_zeros(&tape, xv))
    } else {
        None
    };
    Ok(Probe { value, grad, relu_pattern: tape.relu_pattern() })
}

/// Generic checker over an arbitrary evaluation closure and a subset of flat
/// indices of `x`.
pub fn grad_check_probe<P>(
    mut probe: P,
    x: &Tensor,
    indices: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    P: FnMut(&Tensor, bool) -> Result<Probe, AutodiffError>,
{
    if !x.is_finite() {
        return Err(AutodiffError::NonFinite("grad_check input".into()));
    }
    let center = probe(x, true)?;
    if !center.value.is_finite() {
        return Err(AutodiffError::NonFinite("function value".into()));
    }
    let analytic = center.grad.clone().ok_or(AutodiffError::Invalid {
        op: "grad_check",
        msg: "probe returned no gradient".into(),
    })?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFinite("analytic gradient".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: 0,
        tol,
        passed: true,
    };
    let mut xp = x.clone();
    for &i in indices {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let plus = probe(&xp, false)?;
        xp.data_mut()[i] = orig - eps;
        let minus = probe(&xp, false)?;
        xp.data_mut()[i] = orig;
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(AutodiffError::NonFinite(format!("function value near index {i}")));
        }
        if plus.relu_pattern != center.relu_pattern || minus.relu_pattern != center.relu_pattern {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let rel = relative_error(analytic[i], numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
