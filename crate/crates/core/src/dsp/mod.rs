//! Cough-audio preprocessing and per-frame feature extraction.

mod descriptors;
mod features;
mod mel;
mod preprocess;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use descriptors::{aux_features_frame, pitch_class, AuxFeatures, F0_MAX_HZ, F0_MIN_HZ, VOICING_THRESHOLD};
pub use features::{
    extract_raw, feature_map, fit_frames, frame_count, ChannelGroup, ChannelLayout, ChannelStats, FeatureExtractor,
    FeatureMap, RawFeatures,
};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, mfcc_frame, MelFilterbank};
pub use preprocess::{preprocess_audio, Preprocessed};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CoreError::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(CoreError::Empty("audio signal has no samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> AudioSignal {
        if target_rate == self.sample_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = pos - i0 as f64;
                (self.samples[i0] as f64 * (1.0 - frac) + self.samples[i1] as f64 * frac) as f32
            })
            .collect();
        AudioSignal {
            samples,
            sample_rate: target_rate,
        }
    }
}

/// Framing, filterbank and denoising parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Fraction of lowest-energy frames used for the noise estimate.
    pub noise_percentile: f64,
    pub oversub_alpha: f64,
    pub floor_beta: f64,
    /// Energies are clamped here before taking logs.
    pub log_floor: f64,
    /// Frame count fed to the audio network (1 s at the default hop).
    pub target_frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_len: 400,
            hop_len: 160,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 13,
            fmin: 50.0,
            fmax: 8000.0,
            noise_percentile: 0.1,
            oversub_alpha: 2.0,
            floor_beta: 0.01,
            log_floor: 1e-10,
            target_frames: 98,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(0 < self.hop_len && self.hop_len <= self.frame_len && self.frame_len <= self.n_fft) {
            return bad("need 0 < hop_len <= frame_len <= n_fft");
        }
        if !(0 < self.n_mfcc && self.n_mfcc <= self.n_mels) {
            return bad("need 0 < n_mfcc <= n_mels");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(0.0 < self.noise_percentile && self.noise_percentile <= 1.0) {
            return bad("noise_percentile must lie in (0, 1]");
        }
        if self.target_frames == 0 {
            return bad("target_frames must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Periodic Hann window.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        DspConfig::default().validate().unwrap();
    }

    #[test]
    fn config_invariants_are_enforced() {
        let base = DspConfig::default();
        for cfg in [
            DspConfig { hop_len: 0, ..base.clone() },
            DspConfig { frame_len: 600, ..base.clone() },
            DspConfig { n_mfcc: 41, ..base.clone() },
            DspConfig { fmin: 8000.0, ..base.clone() },
            DspConfig { fmax: 9000.0, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn resample_preserves_endpoints_and_rate() {
        let s = AudioSignal::new((0..441).map(|i| i as f32 / 440.0).collect(), 44_100).unwrap();
        let r = s.resample(16_000);
        assert_eq!(r.sample_rate, 16_000);
        assert_eq!(r.samples.len(), 160);
        assert_eq!(r.samples[0], 0.0);
        // a linear ramp stays linear
        let step = r.samples[1] - r.samples[0];
        assert!(r.samples.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-5));
    }

    #[test]
    fn signal_rejects_empty_and_zero_rate() {
        assert!(AudioSignal::new(vec![], 16_000).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
    }
}
