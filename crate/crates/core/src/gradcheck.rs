//! Central finite-difference checks against the tape's analytic gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|) over checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<(Tape, NodeId, NodeId, f64)>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {v}")));
    }
    Ok((tape, x, out, v))
}

/// Max relative error of the analytic gradient of `f` at `point` over all coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    Ok(finite_diff_check_at(f, point, step, &coords)?.max_rel_error)
}

/// Like [`finite_diff_check`] but only at the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let (tape, x, out, _) = evaluate(&f, point)?;
    let grads = tape.backward(out)?;
    let full = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = evaluate(&f, &probe)?.3;
        probe.data_mut()[i] = orig - step;
        let minus = evaluate(&f, &probe)?.3;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = full.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
