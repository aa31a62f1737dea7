//! 16-bit PCM WAV input and output.

use std::path::Path;

use super::AudioSignal;
use crate::error::{CoreError, Result};

/// Reads a PCM WAV file; multi-channel audio is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(CoreError::Empty("WAV file has no samples".into()));
    }
    AudioSignal::new(mono, spec.sample_rate)
}

/// Writes mono 16-bit PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// PCM16 code for a sample, using the same 1/32768 scale as [`read_wav`] so
/// that `dequantize(quantize(x))` survives a file round trip unchanged.
pub fn quantize(s: f32) -> i16 {
    (s * 32768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

pub fn dequantize(q: i16) -> f32 {
    q as f32 / 32768.0
}
