//! Central finite-difference verification of analytic gradients.

use super::ParamSet;
use crate::error::Result;

/// A scalar loss over encoder parameters with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamSet<f64>) -> Result<f64>;
    fn value_and_grad(&mut self, params: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute rather than relative error.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_per_tensor: Option<usize>,
    /// How many worst offenders to keep in the report.
    pub report_worst: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            abs_floor: 1e-4,
            max_per_tensor: None,
            report_worst: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Sorted worst-first.
    pub worst: Vec<GradMismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `objective`'s analytic gradient at `params` with
/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every checked entry.
pub fn finite_diff_check<O: Objective + ?Sized>(
    params: &ParamSet<f64>,
    objective: &mut O,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.value_and_grad(params)?;
    params.check_shape(&analytic)?;
    let mut probe = params.clone();
    let mut all = Vec::new();
    for t in 0..params.tensors().len() {
        let len = params.tensors()[t].len();
        let indices: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = params.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + opts.step;
            let plus = objective.value(&probe)?;
            probe.tensors_mut()[t][i] = orig - opts.step;
            let minus = objective.value(&probe)?;
            probe.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.tensors()[t][i];
            all.push(GradMismatch {
                tensor: t,
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, opts.abs_floor),
            });
        }
    }
    let checked = all.len();
    all.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = all.first().map_or(0.0, |m| m.rel_err);
    all.truncate(opts.report_worst);
    Ok(GradCheckReport {
        passed: max_rel_err <= opts.tol && max_rel_err.is_finite(),
        checked,
        max_rel_err,
        worst: all,
    })
}
