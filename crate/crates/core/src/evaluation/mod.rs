//! Classification metrics, significance tests, feature ablation and
//! attribution heatmaps.

mod ablation;
mod heatmap;
mod metrics;
mod ttest;

pub use ablation::{
    ablate_features, ablation_table, compare_to_baseline, registered_features, write_ablation_csv, AblationRow, MeanSd,
};
pub use heatmap::{attribution_heatmap, AttributionMap};
pub use metrics::{auroc, confusion, confusion_metrics, Confusion, MetricReport, DEFAULT_THRESHOLD};
pub use ttest::{welch_t_test, TTest};
