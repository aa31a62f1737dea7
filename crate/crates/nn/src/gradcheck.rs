//! Central finite-difference checks against reverse-mode gradients.
//!
//! Only forward evaluations are used here, so the comparison is independent
//! of the backward implementations it checks.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Absolute error accepted near zero.
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel: 1e-4,
            abs: 1e-7,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs || diff / analytic.abs().max(numeric.abs()) <= self.rel
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64, tol: &Tolerance) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if diff > tol.abs && scale > 0.0 {
            self.max_rel_err = self.max_rel_err.max(diff / scale);
        }
        if !tol.accepts(analytic, numeric) {
            self.failures
                .push(format!("{label}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// Evenly spread coordinate subset, or all coordinates when `limit` is None.
fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k + (len / k) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// Checks the analytic gradient of every trainable parameter of `ps`
/// (or up to `limit` coordinates of each) against central differences of `f`.
/// A parameter missing from `analytic` is expected to have zero gradient.
pub fn check_params(
    ps: &ParamStore<f64>,
    analytic: &dyn Fn(ParamId) -> Option<Tensor<f64>>,
    f: &dyn Fn(&ParamStore<f64>) -> f64,
    tol: Tolerance,
    limit: Option<usize>,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut work = ps.clone();
    for id in ps.trainable_ids() {
        let grad = analytic(id);
        let n = ps.get(id).len();
        for i in coords(n, limit) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + tol.step;
            let up = f(&work);
            work.get_mut(id).data_mut()[i] = orig - tol.step;
            let down = f(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            report.record(format!("{}[{i}]", ps.name(id)), a, numeric, &tol);
        }
    }
    report
}

/// Same check for a single input tensor.
pub fn check_input(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: &dyn Fn(&Tensor<f64>) -> f64,
    tol: Tolerance,
    limit: Option<usize>,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut work = x.clone();
    for i in coords(x.len(), limit) {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + tol.step;
        let up = f(&work);
        work.data_mut()[i] = orig - tol.step;
        let down = f(&work);
        work.data_mut()[i] = orig;
        report.record(format!("input[{i}]"), analytic.data()[i], (up - down) / (2.0 * tol.step), &tol);
    }
    report
}
