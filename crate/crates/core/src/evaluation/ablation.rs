use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::ttest::welch_t_test;
use crate::data::Dataset;
use crate::dsp::ChannelGroup;
use crate::error::{CoreError, Result};
use crate::tabular::FEATURE_NAMES;
use crate::training::{cross_validate, CvRun, Exclusion, PipelineConfig};

/// Every feature name the harness can withhold: tabular columns in record
/// order, then the acoustic channel groups. Heatmap rows use the same order.
pub fn registered_features() -> Vec<&'static str> {
    FEATURE_NAMES
        .iter()
        .copied()
        .chain(ChannelGroup::ALL.iter().map(|g| g.name()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full-input baseline.
    pub excluded_feature: Option<String>,
    pub accuracy: MeanSd,
    pub tpr: MeanSd,
    pub tnr: MeanSd,
    pub f1: MeanSd,
    pub auroc: MeanSd,
    pub fold_aurocs: Vec<f64>,
    /// Welch test of per-fold AUROC against the baseline. Absent for the
    /// baseline itself, and when both samples have zero spread.
    pub p_value: Option<f64>,
}

impl AblationRow {
    pub fn from_reports(excluded_feature: Option<String>, reports: &[MetricReport]) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            excluded_feature,
            accuracy: col(|r| r.accuracy),
            tpr: col(|r| r.tpr),
            tnr: col(|r| r.tnr),
            f1: col(|r| r.f1),
            auroc: col(|r| r.auroc),
            fold_aurocs: reports.iter().map(|r| r.auroc).collect(),
            p_value: None,
        }
    }

    pub fn label(&self) -> &str {
        self.excluded_feature.as_deref().unwrap_or("(baseline)")
    }
}

/// Row for a run compared against the baseline's per-fold AUROCs.
pub fn compare_to_baseline(name: &str, run: &CvRun, baseline: &AblationRow) -> AblationRow {
    let mut row = AblationRow::from_reports(Some(name.to_string()), &run.reports());
    row.p_value = welch_t_test(&row.fold_aurocs, &baseline.fold_aurocs).ok().map(|t| t.p);
    row
}

/// Leave-one-out ablation: one cross-validated baseline, then one full
/// retraining per named feature with that feature withheld. All runs share
/// the fold partition. The baseline row comes first.
pub fn ablate_features(data: &Dataset, cfg: &PipelineConfig, features: &[&str]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let exclusions = features
        .iter()
        .map(|&f| Exclusion::feature(f))
        .collect::<Result<Vec<_>>>()?;
    let baseline_run = cross_validate(data, cfg, &Exclusion::none())?;
    let baseline = AblationRow::from_reports(None, &baseline_run.reports());
    if baseline.fold_aurocs.is_empty() {
        return Err(CoreError::Empty("no fold held both classes".into()));
    }
    let rows = features
        .par_iter()
        .zip(&exclusions)
        .map(|(name, ex)| Ok(compare_to_baseline(name, &cross_validate(data, cfg, ex)?, &baseline)))
        .collect::<Result<Vec<_>>>()?;
    Ok(std::iter::once(baseline).chain(rows).collect())
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "excluded_feature,accuracy_mean,accuracy_sd,tpr_mean,tpr_sd,tnr_mean,tnr_sd,f1_mean,f1_sd,auroc_mean,auroc_sd,p_value"
    )?;
    for r in rows {
        write!(w, "{}", r.excluded_feature.as_deref().unwrap_or("baseline"))?;
        for m in [r.accuracy, r.tpr, r.tnr, r.f1, r.auroc] {
            write!(w, ",{},{}", m.mean, m.sd)?;
        }
        writeln!(w, ",{}", r.p_value.map(|p| p.to_string()).unwrap_or_default())?;
    }
    Ok(())
}

/// Fixed-width table with `mean ± sd` cells.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let cell = |m: MeanSd| format!("{:.3} ± {:.3}", m.mean, m.sd);
    let mut out = format!(
        "{:<18} {:>15} {:>15} {:>15} {:>15} {:>15} {:>8}\n",
        "Excluded", "Accuracy", "TPR", "TNR", "F1", "AUROC", "p"
    );
    for r in rows {
        let p = r.p_value.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<18} {:>15} {:>15} {:>15} {:>15} {:>15} {:>8}\n",
            r.label(),
            cell(r.accuracy),
            cell(r.tpr),
            cell(r.tnr),
            cell(r.f1),
            cell(r.auroc),
            p
        ));
    }
    out
}
