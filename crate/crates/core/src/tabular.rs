//! Demographic and clinical record layout.

use serde::{Deserialize, Serialize};

/// Column keys in record order, as they appear in cohort CSV headers.
pub const FEATURE_KEYS: [&str; 12] = [
    "gender",
    "hemoptysis",
    "weight_loss",
    "smoke",
    "fever",
    "night_sweats",
    "age",
    "height",
    "weight",
    "cough_duration",
    "heart_rate",
    "temperature",
];

/// Human-readable names used in ablation tables and heatmaps.
pub const FEATURE_NAMES: [&str; 12] = [
    "Gender",
    "Hemoptysis",
    "Weight Loss",
    "Smoke",
    "Fever",
    "Night Sweats",
    "Age",
    "Height",
    "Weight",
    "Cough Duration",
    "Heart Rate",
    "Temperature",
];

/// Number of leading 0/1 columns.
pub const N_BINARY: usize = 6;

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .or_else(|| FEATURE_KEYS.iter().position(|k| k.eq_ignore_ascii_case(name)))
}

/// One patient's tabular features. `NaN` marks a missing value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub patient_id: String,
    pub features: Vec<f64>,
}

impl TabularRecord {
    pub fn new(patient_id: impl Into<String>, features: Vec<f64>) -> Self {
        Self {
            patient_id: patient_id.into(),
            features,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Copy without the listed columns.
    pub fn without_columns(&self, dropped: &[usize]) -> Self {
        Self {
            patient_id: self.patient_id.clone(),
            features: self
                .features
                .iter()
                .enumerate()
                .filter(|(i, _)| !dropped.contains(i))
                .map(|(_, &v)| v)
                .collect(),
        }
    }
}

/// Tabular record with its out-of-fold boosted-tree probability appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancedTabular {
    pub base: TabularRecord,
    pub p_gbm: f64,
}

impl EnhancedTabular {
    /// Features followed by `p_gbm`; missing values become 0.
    pub fn vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .base
            .features
            .iter()
            .map(|&x| if x.is_nan() { 0.0 } else { x })
            .collect();
        v.push(self.p_gbm);
        v
    }
}
