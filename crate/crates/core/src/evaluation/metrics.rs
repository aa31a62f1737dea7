use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Scores at or above this are called positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub f1: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub counts: Confusion,
}

fn check_labels(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(CoreError::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(CoreError::Empty("no predictions to score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(CoreError::InvalidLabel(bad as f64));
    }
    Ok(())
}

pub fn confusion(labels: &[u8], probs: &[f64], threshold: f64) -> Result<Confusion> {
    check_labels(labels, probs)?;
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(probs) {
        match (y == 1, p >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Threshold metrics plus AUROC. Ties at the threshold count as positive.
pub fn confusion_metrics(labels: &[u8], probs: &[f64], threshold: f64) -> Result<MetricReport> {
    let c = confusion(labels, probs, threshold)?;
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(CoreError::SingleClass(
            "sensitivity and specificity need both classes".into(),
        ));
    }
    let f1_den = 2 * c.tp + c.fp + c.fn_;
    Ok(MetricReport {
        accuracy: (c.tp + c.tn) as f64 / c.n() as f64,
        tpr: c.tp as f64 / (c.tp + c.fn_) as f64,
        tnr: c.tn as f64 / (c.tn + c.fp) as f64,
        f1: if f1_den == 0 { 0.0 } else { 2.0 * c.tp as f64 / f1_den as f64 },
        auroc: auroc(labels, probs)?,
        threshold,
        counts: c,
    })
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// average ranks for ties.
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_labels(labels, scores)?;
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(CoreError::InvalidConfig(format!("score {s} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::SingleClass("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied average ranks integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let avg_x2 = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_tie;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // U = R - np(np+1)/2, so 2U = 2R - np(np+1)
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}
