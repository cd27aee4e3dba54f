//! Central finite-difference gradient check.

use crate::error::AutodiffError;
use crate::graph::{Graph, NodeId};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Flat index within `wrt` of the worst coordinate.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Compares `backward(root)` at input leaf `wrt` with central differences of
/// step `step`, replaying a copy of the graph for each perturbation.
pub fn finite_diff_check(
    graph: &Graph,
    root: NodeId,
    wrt: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport, AutodiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let grads = graph.backward(root)?;
    let base = graph.value(wrt).clone();
    let analytic = grads
        .get(wrt)
        .cloned()
        .unwrap_or_else(|| crate::Tensor::zeros(base.shape()));

    let mut scratch = graph.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance,
        passed: true,
    };
    for idx in 0..base.numel() {
        let mut probe = base.clone();
        probe.data_mut()[idx] = base.data()[idx] + step;
        scratch.set_input(wrt, probe.clone())?;
        let plus = scratch.value(root).data()[0];
        probe.data_mut()[idx] = base.data()[idx] - step;
        scratch.set_input(wrt, probe)?;
        let minus = scratch.value(root).data()[0];
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        if err > report.max_rel_error || idx == 0 {
            report.max_rel_error = err;
            report.worst_index = idx;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
