use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{hann, AudioSignal, DspConfig};
use crate::error::{CoreError, Result};

/// Quiet frames must sit this far below the median frame energy before
/// they are trusted as a noise estimate.
const NOISE_MARGIN_DB: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub signal: AudioSignal,
    /// Input was all zeros; the output is all zeros too.
    pub silent: bool,
    /// Whether spectral subtraction ran (it is skipped when no frames look
    /// like background noise).
    pub denoised: bool,
}

/// Spectral subtraction followed by peak normalization.
pub fn preprocess_audio(signal: &AudioSignal, cfg: &DspConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let n = signal.samples.len();
    if n < cfg.frame_len {
        return Err(CoreError::TooShort {
            samples: n,
            frame_len: cfg.frame_len,
        });
    }
    if signal.samples.iter().all(|&s| s == 0.0) {
        return Ok(Preprocessed {
            signal: signal.clone(),
            silent: true,
            denoised: false,
        });
    }

    let x: Vec<f64> = signal.samples.iter().map(|&s| s as f64).collect();
    let denoise = has_noise_frames(&x, cfg);
    let cleaned = if denoise { spectral_subtract(&x, cfg) } else { x };

    let peak = cleaned.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples = if peak > 0.0 {
        cleaned.iter().map(|v| (v / peak) as f32).collect()
    } else {
        vec![0.0; n]
    };
    Ok(Preprocessed {
        signal: AudioSignal {
            samples,
            sample_rate: signal.sample_rate,
        },
        silent: peak == 0.0,
        denoised: denoise,
    })
}

fn frame_energies(x: &[f64], frame_len: usize, hop: usize) -> Vec<f64> {
    let count = (x.len() - frame_len) / hop + 1;
    (0..count)
        .map(|i| {
            let f = &x[i * hop..i * hop + frame_len];
            f.iter().map(|v| v * v).sum::<f64>() / frame_len as f64
        })
        .collect()
}

fn quiet_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).ceil() as usize).clamp(1, total)
}

fn has_noise_frames(x: &[f64], cfg: &DspConfig) -> bool {
    let mut e = frame_energies(x, cfg.frame_len, cfg.hop_len);
    e.sort_by(f64::total_cmp);
    let k = quiet_count(e.len(), cfg.noise_percentile);
    let quiet = e[..k].iter().sum::<f64>() / k as f64;
    let median = e[e.len() / 2];
    quiet * 10f64.powf(NOISE_MARGIN_DB / 10.0) <= median
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn spectral_subtract(x: &[f64], cfg: &DspConfig) -> Vec<f64> {
    let (fl, hop, nfft) = (cfg.frame_len, cfg.hop_len, cfg.n_fft);
    let n = x.len();
    let mut padded = vec![0.0; n + 2 * fl];
    padded[fl..fl + n].copy_from_slice(x);
    let n_frames = (padded.len() - fl) / hop + 1;
    let window = hann(fl);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let ifft = planner.plan_fft_inverse(nfft);
    let n_bins = nfft / 2 + 1;

    let spectra: Vec<Vec<Complex<f64>>> = (0..n_frames)
        .map(|i| {
            let mut buf = vec![Complex::new(0.0, 0.0); nfft];
            for (j, b) in buf.iter_mut().take(fl).enumerate() {
                b.re = padded[i * hop + j] * window[j];
            }
            fft.process(&mut buf);
            buf
        })
        .collect();

    // Noise is estimated from frames lying wholly inside the original signal.
    let interior: Vec<usize> = (0..n_frames)
        .filter(|&i| i * hop >= fl && i * hop + fl <= fl + n)
        .collect();
    let mut by_energy: Vec<(f64, usize)> = interior
        .iter()
        .map(|&i| (spectra[i][..n_bins].iter().map(|c| c.norm_sqr()).sum(), i))
        .collect();
    by_energy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let quiet: Vec<usize> = by_energy[..quiet_count(by_energy.len(), cfg.noise_percentile)]
        .iter()
        .map(|&(_, i)| i)
        .collect();
    let noise: Vec<f64> = (0..n_bins)
        .map(|k| {
            let mut mags: Vec<f64> = quiet.iter().map(|&i| spectra[i][k].norm()).collect();
            median(&mut mags)
        })
        .collect();

    let mut out = vec![0.0; padded.len()];
    let mut norm = vec![0.0; padded.len()];
    for (i, spec) in spectra.into_iter().enumerate() {
        let mut buf = spec;
        for k in 0..n_bins {
            let mag = buf[k].norm();
            let cleaned = (mag - cfg.oversub_alpha * noise[k]).max(cfg.floor_beta * noise[k]);
            buf[k] = if mag > 0.0 { buf[k] * (cleaned / mag) } else { Complex::new(0.0, 0.0) };
            if k > 0 && k < nfft - k {
                buf[nfft - k] = buf[k].conj();
            }
        }
        ifft.process(&mut buf);
        for j in 0..fl {
            let p = i * hop + j;
            out[p] += buf[j].re / nfft as f64 * window[j];
            norm[p] += window[j] * window[j];
        }
    }
    (0..n)
        .map(|j| {
            let p = fl + j;
            if norm[p] > 1e-10 {
                out[p] / norm[p]
            } else {
                0.0
            }
        })
        .collect()
}
