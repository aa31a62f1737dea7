use serde::{Deserialize, Serialize};

/// Bin index reserved for missing values.
pub const MISSING_BIN: u16 = u16::MAX;

/// Per-feature quantile cut points. A value `x` falls in bin `b`, the
/// number of thresholds strictly below `x`, so `bin(x) <= t` exactly when
/// `x <= thresholds[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMapper {
    pub thresholds: Vec<Vec<f64>>,
}

impl BinMapper {
    /// Fits cut points column by column on `rows` (missing values ignored).
    pub fn fit(rows: &[&[f64]], n_bins: usize) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let thresholds = (0..d)
            .map(|j| {
                let mut vals: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
                vals.sort_by(f64::total_cmp);
                cut_points(&vals, n_bins)
            })
            .collect();
        Self { thresholds }
    }

    pub fn n_features(&self) -> usize {
        self.thresholds.len()
    }

    /// Number of value bins of feature `j` (missing excluded).
    pub fn n_bins(&self, j: usize) -> usize {
        self.thresholds[j].len() + 1
    }

    pub fn bin(&self, j: usize, x: f64) -> u16 {
        if x.is_nan() {
            MISSING_BIN
        } else {
            self.thresholds[j].partition_point(|&t| t < x) as u16
        }
    }

    /// Column-major binned matrix: `out[j][i]`.
    pub fn transform(&self, rows: &[&[f64]]) -> Vec<Vec<u16>> {
        (0..self.n_features())
            .map(|j| rows.iter().map(|r| self.bin(j, r[j])).collect())
            .collect()
    }
}

/// Midpoints between consecutive distinct values when there are few of
/// them, otherwise distinct empirical quantiles.
fn cut_points(sorted: &[f64], n_bins: usize) -> Vec<f64> {
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    if distinct.len() <= n_bins {
        return distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(n_bins - 1);
    for q in 1..n_bins {
        let v = sorted[(q * n / n_bins).min(n - 1)];
        if cuts.last().map_or(true, |&c| v > c) && v < *sorted.last().unwrap() {
            cuts.push(v);
        }
    }
    cuts
}
