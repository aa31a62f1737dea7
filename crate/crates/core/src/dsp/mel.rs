use std::f64::consts::PI;

use super::DspConfig;
use crate::error::{CoreError, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on FFT bins, one row per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
    /// Filter centers before snapping to FFT bins.
    pub centers_hz: Vec<f64>,
    /// Bin index of each filter's peak.
    pub center_bins: Vec<usize>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// Filter energies of a power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Mel filterbank with `n_mels` triangles whose edges are `n_mels + 2`
/// points spaced evenly in mel between `fmin` and `fmax`, snapped to the
/// nearest FFT bin.
pub fn mel_filterbank(cfg: &DspConfig, sample_rate: u32) -> Result<MelFilterbank> {
    let cfg = DspConfig {
        sample_rate,
        ..cfg.clone()
    };
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges_hz: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    let edges: Vec<usize> = edges_hz
        .iter()
        .map(|f| ((f * cfg.n_fft as f64 / sample_rate as f64).round() as usize).min(n_bins - 1))
        .collect();
    if let Some(i) = (1..edges.len()).find(|&i| edges[i] <= edges[i - 1]) {
        return Err(CoreError::FilterbankDegenerate(i - 1, i));
    }

    let weights = (1..=cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m - 1], edges[m], edges[m + 1]);
            (0..n_bins)
                .map(|k| {
                    if k >= l && k <= c {
                        (k - l) as f64 / (c - l) as f64
                    } else if k > c && k <= r {
                        (r - k) as f64 / (r - c) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(MelFilterbank {
        weights,
        centers_hz: edges_hz[1..=cfg.n_mels].to_vec(),
        center_bins: edges[1..=cfg.n_mels].to_vec(),
    })
}

/// Cepstral coefficients `c_1..c_L` of `M` log filter energies:
/// `c_n = Σ_k log S_k · cos(n (k - 1/2) π / M)`, unscaled DCT-II.
pub fn mfcc_frame(log_energies: &[f64], n_coeffs: usize) -> Result<Vec<f64>> {
    let m = log_energies.len();
    if n_coeffs == 0 || n_coeffs > m {
        return Err(CoreError::InvalidConfig(format!(
            "need 1 <= L <= M, got L={n_coeffs}, M={m}"
        )));
    }
    if let Some(i) = log_energies.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::InvalidEnergies(i));
    }
    Ok((1..=n_coeffs)
        .map(|n| {
            log_energies
                .iter()
                .enumerate()
                .map(|(k0, &s)| s * (n as f64 * (k0 as f64 + 0.5) * PI / m as f64).cos())
                .sum()
        })
        .collect())
}
