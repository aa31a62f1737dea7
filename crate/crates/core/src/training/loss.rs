use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which objective the fusion network is trained with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Risk-balanced cross-entropy with positive weight `lambda`.
    #[default]
    Trbl,
    /// Plain cross-entropy; `lambda` is ignored.
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrblConfig {
    /// Weight on positive samples; missed positives cost `lambda` times more.
    pub lambda: f64,
    pub clamp_eps: f64,
    pub kind: LossKind,
}

impl Default for TrblConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            clamp_eps: 1e-7,
            kind: LossKind::Trbl,
        }
    }
}

impl TrblConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(CoreError::InvalidConfig(format!("lambda {} must be >= 1", self.lambda)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(CoreError::InvalidConfig(format!(
                "clamp_eps {} outside (0, 0.5)",
                self.clamp_eps
            )));
        }
        Ok(())
    }

    /// The positive-class weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        match self.kind {
            LossKind::Trbl => self.lambda,
            LossKind::Bce => 1.0,
        }
    }
}

fn check_label(y: u8) -> Result<f64> {
    match y {
        0 => Ok(0.0),
        1 => Ok(1.0),
        _ => Err(CoreError::InvalidLabel(y as f64)),
    }
}

/// Per-sample risk-balanced loss `BCE(y, p) * (1 - y + lambda * y)`.
pub fn trbl(y: u8, p: f64, cfg: &TrblConfig) -> Result<f64> {
    let y = check_label(y)?;
    let p = p.clamp(cfg.clamp_eps, 1.0 - cfg.clamp_eps);
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    Ok(bce * (1.0 - y + cfg.effective_lambda() * y))
}

/// Derivative of [`trbl`] with respect to `p` (zero where the clamp is active).
pub fn trbl_grad(y: u8, p: f64, cfg: &TrblConfig) -> Result<f64> {
    let yf = check_label(y)?;
    if p < cfg.clamp_eps || p > 1.0 - cfg.clamp_eps {
        return Ok(0.0);
    }
    let w = 1.0 - yf + cfg.effective_lambda() * yf;
    Ok(w * (-yf / p + (1.0 - yf) / (1.0 - p)))
}

/// Mean per-sample loss over a batch.
pub fn batch_loss(ys: &[u8], ps: &[f64], cfg: &TrblConfig) -> Result<f64> {
    if ys.len() != ps.len() {
        return Err(CoreError::DimensionMismatch {
            expected: ys.len(),
            got: ps.len(),
        });
    }
    if ys.is_empty() {
        return Err(CoreError::Empty("empty batch".into()));
    }
    let mut total = 0.0;
    for (&y, &p) in ys.iter().zip(ps) {
        total += trbl(y, p, cfg)?;
    }
    Ok(total / ys.len() as f64)
}
