use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{CoreError, Result};

const GRAD_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 100;
/// Fitted probabilities this close to the labels everywhere mean the data
/// are separable.
const SEPARATION_RESIDUAL: f64 = 1e-6;
const MAX_COEF_NORM: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one coefficient per input column.
    pub coefficients: Vec<f64>,
    /// Inverse Fisher information at the solution.
    pub covariance: Vec<Vec<f64>>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn design(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = x.first().map_or(0, Vec::len);
    if let Some(bad) = x.iter().find(|r| r.len() != k) {
        return Err(CoreError::DimensionMismatch {
            expected: k,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(x.len(), k + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] }))
}

/// Score vector `X'(y - p)` and Fisher information `X'WX`.
fn score_and_information(xm: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let p = (xm * beta).map(sigmoid);
    let w = p.map(|v| v * (1.0 - v));
    let grad = xm.transpose() * (y - &p);
    let mut xw = xm.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    (grad, xm.transpose() * xw, p)
}

/// Maximum-likelihood logistic regression with an intercept, by Newton
/// steps (iteratively reweighted least squares).
pub fn logistic_fit(x: &[Vec<f64>], y: &[u8]) -> Result<LogisticFit> {
    if x.len() != y.len() {
        return Err(CoreError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(CoreError::Empty("no observations".into()));
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(CoreError::InvalidLabel(bad as f64));
    }
    let xm = design(x)?;
    let yv = DVector::from_iterator(y.len(), y.iter().map(|&v| v as f64));
    let k = xm.ncols();
    let mut beta = DVector::zeros(k);
    for iter in 0..=MAX_ITERS {
        let (grad, info, p) = score_and_information(&xm, &yv, &beta);
        let gnorm = grad.norm();
        if gnorm < GRAD_TOL {
            let max_residual = (&yv - &p).amax();
            if max_residual < SEPARATION_RESIDUAL {
                return Err(CoreError::NonIdentifiable("classes are perfectly separated".into()));
            }
            let chol = info
                .cholesky()
                .ok_or_else(|| CoreError::NonIdentifiable("singular information matrix".into()))?;
            let cov = chol.inverse();
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                covariance: (0..k).map(|i| (0..k).map(|j| cov[(i, j)]).collect()).collect(),
                iterations: iter,
                gradient_norm: gnorm,
            });
        }
        let chol = info
            .cholesky()
            .ok_or_else(|| CoreError::NonIdentifiable("singular information matrix".into()))?;
        beta += chol.solve(&grad);
        if !(beta.norm() < MAX_COEF_NORM) {
            return Err(CoreError::NonIdentifiable("coefficient norm diverged".into()));
        }
    }
    Err(CoreError::NonIdentifiable(format!("no convergence in {MAX_ITERS} Newton steps")))
}

/// Two-sided Wald test of one coefficient, `z = beta / se`.
pub fn wald_test(coefficients: &[f64], covariance: &[Vec<f64>], index: usize) -> Result<WaldTest> {
    let k = coefficients.len();
    if covariance.len() != k || covariance.iter().any(|r| r.len() != k) {
        return Err(CoreError::DimensionMismatch {
            expected: k,
            got: covariance.len(),
        });
    }
    if index >= k {
        return Err(CoreError::DimensionMismatch { expected: k, got: index });
    }
    let m = DMatrix::from_fn(k, k, |i, j| covariance[i][j]);
    if m.cholesky().is_none() {
        return Err(CoreError::NotPositiveDefinite);
    }
    let z = coefficients[index] / covariance[index][index].sqrt();
    Ok(WaldTest {
        z,
        p: erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0),
    })
}
