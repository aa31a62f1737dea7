pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 500.0;
/// Minimum normalized autocorrelation for a frame to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Among candidate lags, the shortest one within this fraction of the best
/// peak wins, which avoids octave-down errors on periodic signals.
const OCTAVE_TOLERANCE: f64 = 0.9;
/// Lowest frequency assigned a pitch class (C1).
const CHROMA_MIN_HZ: f64 = 32.70;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxFeatures {
    pub zcr: f64,
    pub centroid: f64,
    pub f0: f64,
    pub energy: f64,
    pub chroma: [f64; 12],
}

/// Pitch class of a frequency, C = 0 ... B = 11.
pub fn pitch_class(freq: f64) -> usize {
    let semis = (12.0 * (freq / 440.0).log2()).round() as i64;
    (semis + 9).rem_euclid(12) as usize
}

/// Per-frame descriptors. `frame` is the unwindowed frame; `spectrum` the
/// magnitude DFT (bins `0..=n_fft/2`) of the windowed frame.
pub fn aux_features_frame(frame: &[f64], spectrum: &[f64], sample_rate: u32) -> AuxFeatures {
    let sr = sample_rate as f64;
    let n_fft = 2 * (spectrum.len() - 1);
    let bin_hz = sr / n_fft as f64;

    let crossings = frame.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
    let zcr = if frame.len() > 1 {
        crossings as f64 / (frame.len() - 1) as f64
    } else {
        0.0
    };

    let mag_sum: f64 = spectrum.iter().sum();
    let centroid = if mag_sum > 0.0 {
        spectrum.iter().enumerate().map(|(k, m)| k as f64 * bin_hz * m).sum::<f64>() / mag_sum
    } else {
        0.0
    };

    let energy = frame.iter().map(|v| v * v).sum::<f64>() / frame.len().max(1) as f64;

    AuxFeatures {
        zcr,
        centroid,
        f0: autocorrelation_f0(frame, sr),
        energy,
        chroma: chroma(spectrum, bin_hz),
    }
}

fn autocorrelation_f0(x: &[f64], sr: f64) -> f64 {
    let min_lag = (sr / F0_MAX_HZ).floor() as usize;
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(x.len().saturating_sub(2));
    if min_lag < 1 || max_lag <= min_lag + 1 {
        return 0.0;
    }
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1)
        .map(|lag| {
            if lag >= x.len() {
                return 0.0;
            }
            let (a, b) = (&x[..x.len() - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let den = (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    // r[i] holds lag min_lag - 1 + i; candidates are interior local maxima.
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > r[i - 1] && r[i] >= r[i + 1])
        .collect();
    let best = peaks.iter().map(|&i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    if peaks.is_empty() || best < VOICING_THRESHOLD {
        return 0.0;
    }
    let i = *peaks
        .iter()
        .find(|&&i| r[i] >= OCTAVE_TOLERANCE * best)
        .expect("best peak qualifies");
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    let lag = (min_lag - 1 + i) as f64 + shift.clamp(-0.5, 0.5);
    sr / lag
}

/// Pitch-class histogram built from spectral peaks. Each peak contributes
/// its power at a frequency refined by a parabola through the log
/// magnitudes of the peak bin and its neighbours.
fn chroma(spectrum: &[f64], bin_hz: f64) -> [f64; 12] {
    let mut out = [0.0; 12];
    for k in 1..spectrum.len().saturating_sub(1) {
        let (a, b, c) = (spectrum[k - 1], spectrum[k], spectrum[k + 1]);
        if !(b > a && b >= c && b > 0.0) {
            continue;
        }
        let shift = if a > 0.0 && c > 0.0 {
            let (la, lb, lc) = (a.ln(), b.ln(), c.ln());
            let denom = la - 2.0 * lb + lc;
            if denom.abs() > 1e-12 {
                (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        } else {
            0.0
        };
        let freq = (k as f64 + shift) * bin_hz;
        if freq >= CHROMA_MIN_HZ {
            out[pitch_class(freq)] += b * b;
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}
