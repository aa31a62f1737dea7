use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::descriptors::aux_features_frame;
use super::mel::{mel_filterbank, mfcc_frame, MelFilterbank};
use super::preprocess::preprocess_audio;
use super::{hann, AudioSignal, DspConfig};
use crate::error::{CoreError, Result};

const CFM_MAGIC: &[u8; 4] = b"CFM1";
const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// Acoustic channel groups that can be excluded together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelGroup {
    Zcr,
    Centroid,
    F0,
    Energy,
    Chroma,
    Mfcc,
    Mel,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 7] = [
        ChannelGroup::Zcr,
        ChannelGroup::Centroid,
        ChannelGroup::F0,
        ChannelGroup::Energy,
        ChannelGroup::Chroma,
        ChannelGroup::Mfcc,
        ChannelGroup::Mel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::Zcr => "ZCR",
            ChannelGroup::Centroid => "Centroid",
            ChannelGroup::F0 => "F0",
            ChannelGroup::Energy => "Energy",
            ChannelGroup::Chroma => "Chroma Vector",
            ChannelGroup::Mfcc => "MFCCs",
            ChannelGroup::Mel => "Mel-Spectrogram",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name().eq_ignore_ascii_case(name))
    }
}

/// Row layout of a feature map: MFCCs, mel log-energies, ZCR, centroid,
/// F0, energy, then the 12 chroma bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub n_mfcc: usize,
    pub n_mels: usize,
}

impl ChannelLayout {
    pub fn new(cfg: &DspConfig) -> Self {
        Self {
            n_mfcc: cfg.n_mfcc,
            n_mels: cfg.n_mels,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_mfcc + self.n_mels + 4 + 12
    }

    pub fn range(&self, group: ChannelGroup) -> Range<usize> {
        let aux = self.n_mfcc + self.n_mels;
        match group {
            ChannelGroup::Mfcc => 0..self.n_mfcc,
            ChannelGroup::Mel => self.n_mfcc..aux,
            ChannelGroup::Zcr => aux..aux + 1,
            ChannelGroup::Centroid => aux + 1..aux + 2,
            ChannelGroup::F0 => aux + 2..aux + 3,
            ChannelGroup::Energy => aux + 3..aux + 4,
            ChannelGroup::Chroma => aux + 4..aux + 16,
        }
    }

    pub fn group_of(&self, channel: usize) -> ChannelGroup {
        ChannelGroup::ALL
            .into_iter()
            .find(|&g| self.range(g).contains(&channel))
            .expect("channel index within layout")
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n_mfcc).map(|i| format!("mfcc{i}")).collect();
        names.extend((1..=self.n_mels).map(|i| format!("mel{i}")));
        names.extend(["zcr", "centroid", "f0", "energy"].map(String::from));
        names.extend(PITCH_NAMES.iter().map(|p| format!("chroma_{p}")));
        names
    }

    /// Channel indices kept when `excluded` groups are dropped, in order.
    pub fn kept_channels(&self, excluded: &[ChannelGroup]) -> Vec<usize> {
        (0..self.n_channels())
            .filter(|&c| !excluded.contains(&self.group_of(c)))
            .collect()
    }
}

/// Number of full frames in `n_samples`.
pub fn frame_count(n_samples: usize, cfg: &DspConfig) -> usize {
    if n_samples < cfg.frame_len {
        0
    } else {
        (n_samples - cfg.frame_len) / cfg.hop_len + 1
    }
}

/// Un-normalized per-frame channels of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub n_channels: usize,
    pub n_frames: usize,
    /// Row-major `n_channels x n_frames`.
    pub data: Vec<f64>,
    pub silent: bool,
}

impl RawFeatures {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_frames..(c + 1) * self.n_frames]
    }
}

/// Reusable extractor holding the filterbank, window and FFT plan.
#[derive(Clone)]
pub struct FeatureExtractor {
    cfg: DspConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("cfg", &self.cfg).finish()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            filterbank: mel_filterbank(cfg, cfg.sample_rate)?,
            window: hann(cfg.frame_len),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout::new(&self.cfg)
    }

    pub fn extract(&self, signal: &AudioSignal) -> Result<RawFeatures> {
        let cfg = &self.cfg;
        let signal = signal.resample(cfg.sample_rate);
        let pre = preprocess_audio(&signal, cfg)?;
        let x: Vec<f64> = pre.signal.samples.iter().map(|&s| s as f64).collect();
        let n_frames = frame_count(x.len(), cfg);
        let layout = self.layout();
        let n_ch = layout.n_channels();
        let mut data = vec![0.0; n_ch * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let n_bins = cfg.n_bins();
        let aux0 = cfg.n_mfcc + cfg.n_mels;
        for t in 0..n_frames {
            let frame = &x[t * cfg.hop_len..t * cfg.hop_len + cfg.frame_len];
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for (j, b) in buf.iter_mut().take(cfg.frame_len).enumerate() {
                b.re = frame[j] * self.window[j];
            }
            self.fft.process(&mut buf);
            let magnitude: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
            let power: Vec<f64> = magnitude.iter().map(|m| m * m).collect();
            let log_mel: Vec<f64> = self
                .filterbank
                .apply(&power)
                .into_iter()
                .map(|e| e.max(cfg.log_floor).ln())
                .collect();
            let mfcc = mfcc_frame(&log_mel, cfg.n_mfcc)?;
            let aux = aux_features_frame(frame, &magnitude, cfg.sample_rate);
            let mut set = |c: usize, v: f64| data[c * n_frames + t] = v;
            for (i, v) in mfcc.into_iter().enumerate() {
                set(i, v);
            }
            for (i, v) in log_mel.into_iter().enumerate() {
                set(cfg.n_mfcc + i, v);
            }
            set(aux0, aux.zcr);
            set(aux0 + 1, aux.centroid);
            set(aux0 + 2, aux.f0);
            set(aux0 + 3, aux.energy);
            for (i, v) in aux.chroma.into_iter().enumerate() {
                set(aux0 + 4 + i, v);
            }
        }
        Ok(RawFeatures {
            n_channels: n_ch,
            n_frames,
            data,
            silent: pre.silent,
        })
    }

    /// Normalized, length-fitted network input.
    pub fn feature_map(&self, signal: &AudioSignal, stats: &ChannelStats) -> Result<FeatureMap> {
        let raw = self.extract(signal)?;
        Ok(FeatureMap::from_raw(&raw, stats, self.cfg.target_frames))
    }
}

pub fn extract_raw(signal: &AudioSignal, cfg: &DspConfig) -> Result<RawFeatures> {
    FeatureExtractor::new(cfg)?.extract(signal)
}

pub fn feature_map(signal: &AudioSignal, cfg: &DspConfig, stats: &ChannelStats) -> Result<FeatureMap> {
    FeatureExtractor::new(cfg)?.feature_map(signal, stats)
}

/// Per-channel z-score statistics pooled over all training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pass-through statistics (mean 0, std 1).
    pub fn identity(n_channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
        }
    }

    pub fn fit<'a>(features: impl IntoIterator<Item = &'a RawFeatures>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in features {
            if sum.is_empty() {
                sum = vec![0.0; f.n_channels];
                sq = vec![0.0; f.n_channels];
            } else if sum.len() != f.n_channels {
                return Err(CoreError::DimensionMismatch {
                    expected: sum.len(),
                    got: f.n_channels,
                });
            }
            for c in 0..f.n_channels {
                for &v in f.row(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += f.n_frames;
        }
        if count == 0 {
            return Err(CoreError::Empty("no frames to fit channel statistics".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                // constant channels pass through unscaled
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// Network input: `n_channels x n_frames`, row-major, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n_channels: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
}

/// Center-crop or symmetrically zero-pad each row of a `channels x frames`
/// matrix to `target` frames.
pub fn fit_frames(data: &[f64], n_channels: usize, n_frames: usize, target: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_channels * target];
    let (src_start, dst_start, len) = if n_frames >= target {
        ((n_frames - target) / 2, 0, target)
    } else {
        (0, (target - n_frames) / 2, n_frames)
    };
    for c in 0..n_channels {
        let src = &data[c * n_frames + src_start..c * n_frames + src_start + len];
        out[c * target + dst_start..c * target + dst_start + len].copy_from_slice(src);
    }
    out
}

impl FeatureMap {
    pub fn zeros(n_channels: usize, n_frames: usize) -> Self {
        Self {
            n_channels,
            n_frames,
            data: vec![0.0; n_channels * n_frames],
        }
    }

    pub fn from_raw(raw: &RawFeatures, stats: &ChannelStats, target_frames: usize) -> Self {
        let mut z = raw.data.clone();
        for c in 0..raw.n_channels {
            let (m, s) = (stats.mean[c], stats.std[c]);
            z[c * raw.n_frames..(c + 1) * raw.n_frames]
                .iter_mut()
                .for_each(|v| *v = (*v - m) / s);
        }
        let fitted = fit_frames(&z, raw.n_channels, raw.n_frames, target_frames);
        Self {
            n_channels: raw.n_channels,
            n_frames: target_frames,
            data: fitted.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_frames..(c + 1) * self.n_frames]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Overwrite the listed channel rows with zeros (the channel mean after
    /// normalization).
    pub fn zero_channels(&mut self, channels: &[usize]) {
        for &c in channels {
            self.data[c * self.n_frames..(c + 1) * self.n_frames].fill(0.0);
        }
    }

    /// Keep only the listed channel rows, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> FeatureMap {
        let mut data = Vec::with_capacity(channels.len() * self.n_frames);
        for &c in channels {
            data.extend_from_slice(self.row(c));
        }
        FeatureMap {
            n_channels: channels.len(),
            n_frames: self.n_frames,
            data,
        }
    }

    /// Binary export: `CFM1`, then `u32` channels, frames, reserved (all
    /// little-endian), then row-major `f32` values.
    pub fn write_cfm<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CFM_MAGIC)?;
        for v in [self.n_channels as u32, self.n_frames as u32, 0] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cfm<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != CFM_MAGIC {
            return Err(CoreError::InvalidConfig("not a CFM1 feature map".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (c, t) = (word(1), word(2));
        let mut bytes = vec![0u8; c * t * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_channels: c,
            n_frames: t,
            data,
        })
    }

    /// One CSV row per channel: name, then per-frame values.
    pub fn write_csv<W: Write>(&self, names: &[String], mut w: W) -> Result<()> {
        write!(w, "channel")?;
        for t in 0..self.n_frames {
            write!(w, ",t{t}")?;
        }
        writeln!(w)?;
        for c in 0..self.n_channels {
            let name = names.get(c).cloned().unwrap_or_else(|| format!("ch{c}"));
            write!(w, "{name}")?;
            for v in self.row(c) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
