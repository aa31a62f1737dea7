use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Cohort, CohortRecord, Provenance};
use crate::dsp::wav::{dequantize, quantize};
use crate::dsp::{AudioSignal, SAMPLE_RATE};
use crate::error::{CoreError, Result};
use crate::tabular::{feature_index, TabularRecord, FEATURE_KEYS};

/// Class-conditional occurrence rate of a binary symptom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub positive: f64,
    pub negative: f64,
}

const fn rate(positive: f64, negative: f64) -> Rate {
    Rate { positive, negative }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub male_fraction: f64,
    pub male_prevalence: f64,
    pub female_prevalence: f64,
    pub hemoptysis: Rate,
    pub weight_loss: Rate,
    pub smoke: Rate,
    pub fever: Rate,
    pub night_sweats: Rate,
    /// Scales every class difference in the tabular columns; 0 removes it.
    pub tabular_coupling: f64,
    /// Scales how much more often positives carry the acoustic markers; 0
    /// makes audio independent of the label.
    pub audio_coupling: f64,
    /// Tabular columns allowed to depend on the label (all when `None`).
    pub informative: Option<Vec<String>>,
    pub clip_secs: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1105,
            male_fraction: 0.5,
            male_prevalence: 0.332,
            female_prevalence: 0.197,
            hemoptysis: rate(0.432, 0.243),
            weight_loss: rate(0.365, 0.119),
            smoke: rate(0.30, 0.20),
            fever: rate(0.400, 0.161),
            night_sweats: rate(0.390, 0.173),
            tabular_coupling: 1.0,
            audio_coupling: 1.0,
            informative: None,
            clip_secs: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(CoreError::InvalidConfig(format!("n >= 20 required, got n = {}", self.n)));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CoreError::InvalidConfig(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("male_fraction", self.male_fraction)?;
        unit("male_prevalence", self.male_prevalence)?;
        unit("female_prevalence", self.female_prevalence)?;
        unit("tabular_coupling", self.tabular_coupling)?;
        unit("audio_coupling", self.audio_coupling)?;
        for (name, r) in [
            ("hemoptysis", self.hemoptysis),
            ("weight_loss", self.weight_loss),
            ("smoke", self.smoke),
            ("fever", self.fever),
            ("night_sweats", self.night_sweats),
        ] {
            unit(name, r.positive)?;
            unit(name, r.negative)?;
        }
        if let Some(names) = &self.informative {
            for n in names {
                feature_index(n).ok_or_else(|| CoreError::UnknownFeature(n.clone()))?;
            }
        }
        if !(self.clip_secs >= 0.5 && self.clip_secs <= 10.0) {
            return Err(CoreError::InvalidConfig(format!("clip_secs {} outside [0.5, 10]", self.clip_secs)));
        }
        Ok(())
    }

    fn is_informative(&self, key: &str) -> bool {
        match &self.informative {
            None => true,
            Some(names) => names.iter().any(|n| feature_index(n) == feature_index(key)),
        }
    }
}

/// Draws a cohort whose labels follow the sex-specific prevalences, whose
/// symptom bits follow the class-conditional rates, and whose audio is a
/// decaying noise burst; positives more often carry a high-frequency tilt
/// and a 400-600 Hz wheeze partial. Deterministic in `cfg`.
pub fn synth_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let records = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            synth_record(cfg, i, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        records,
        provenance: Provenance::Synthetic { seed: cfg.seed },
    })
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("positive sd").sample(rng)
}

fn synth_record(cfg: &SynthConfig, i: usize, rng: &mut ChaCha8Rng) -> Result<CohortRecord> {
    let c = cfg.tabular_coupling;
    let male = rng.gen_bool(cfg.male_fraction);
    let prevalence = if cfg.is_informative("gender") {
        if male {
            cfg.male_prevalence
        } else {
            cfg.female_prevalence
        }
    } else {
        cfg.male_fraction * cfg.male_prevalence + (1.0 - cfg.male_fraction) * cfg.female_prevalence
    };
    let label = rng.gen_bool(prevalence) as u8;
    let pos = label == 1;

    // Positives shift from the negative-class value by `c` times the gap,
    // and only in informative columns.
    let shifted = |key: &str, neg: f64, pos_v: f64| {
        if pos && cfg.is_informative(key) {
            neg + c * (pos_v - neg)
        } else {
            neg
        }
    };
    let mut bit = |key: &str, r: Rate| -> f64 {
        rng.gen_bool(shifted(key, r.negative, r.positive).clamp(0.0, 1.0)) as u8 as f64
    };
    let hemoptysis = bit("hemoptysis", cfg.hemoptysis);
    let weight_loss = bit("weight_loss", cfg.weight_loss);
    let smoke = bit("smoke", cfg.smoke);
    let fever = bit("fever", cfg.fever);
    let night_sweats = bit("night_sweats", cfg.night_sweats);

    let age = gaussian(rng, shifted("age", 42.0, 39.0), 14.0).clamp(18.0, 90.0).round();
    let height = if male {
        gaussian(rng, 170.0, 7.0)
    } else {
        gaussian(rng, 158.0, 6.0)
    };
    let weight = gaussian(rng, shifted("weight", 62.0, 54.0) + if male { 6.0 } else { 0.0 }, 10.0).max(30.0);
    let cough_mu = shifted("cough_duration", 3.0f64.ln(), 4.5f64.ln());
    let cough_duration = LogNormal::new(cough_mu, 0.5).expect("valid lognormal").sample(rng);
    let heart_rate = gaussian(rng, shifted("heart_rate", 80.0, 88.0), 10.0);
    let temp_mean = shifted("temperature", 36.8, 37.4);
    let temp_sd = shifted("temperature", 0.4, 0.5);
    let temperature = gaussian(rng, temp_mean, temp_sd);

    let round1 = |v: f64| (v * 10.0).round() / 10.0;
    let features = vec![
        male as u8 as f64,
        hemoptysis,
        weight_loss,
        smoke,
        fever,
        night_sweats,
        age,
        round1(height),
        round1(weight),
        round1(cough_duration),
        heart_rate.round(),
        round1(temperature),
    ];
    debug_assert_eq!(features.len(), FEATURE_KEYS.len());
    let id = format!("P{:05}", i + 1);
    let audio = synth_cough(cfg, pos, rng)?;
    Ok(CohortRecord {
        record: TabularRecord::new(id.clone(), features),
        label,
        audio_file: format!("{id}.wav"),
        audio,
    })
}

fn synth_cough(cfg: &SynthConfig, positive: bool, rng: &mut ChaCha8Rng) -> Result<AudioSignal> {
    let sr = SAMPLE_RATE as f64;
    let n = (cfg.clip_secs * sr).round() as usize;
    let base_rate = 0.15;
    let marker_rate = if positive {
        base_rate + cfg.audio_coupling * 0.6
    } else {
        base_rate
    };
    let tilt = rng.gen_bool(marker_rate);
    let wheeze = rng.gen_bool(marker_rate);

    let onset = (rng.gen_range(0.05..0.25) * sr) as usize;
    let burst = (0.7 * sr) as usize;
    let tau = rng.gen_range(0.12..0.25) * sr;
    let attack = 0.01 * sr;
    let color = rng.gen_range(0.3..0.8);
    let tilt_gain = rng.gen_range(1.0..2.0);
    let wheeze_hz = rng.gen_range(400.0..600.0);
    let wheeze_amp = rng.gen_range(0.15..0.35);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let gain = rng.gen_range(0.3..0.9);
    let white = Normal::new(0.0, 1.0).expect("unit normal");

    let mut x = vec![0.0f64; n];
    let (mut low, mut prev_low) = (0.0, 0.0);
    for (t, out) in x.iter_mut().enumerate() {
        let background = 0.003 * white.sample(rng);
        if t < onset || t >= onset + burst {
            *out = background;
            continue;
        }
        let k = (t - onset) as f64;
        let env = if k < attack { k / attack } else { (-(k - attack) / tau).exp() };
        low = (1.0 - color) * white.sample(rng) + color * low;
        let mut s = low;
        if tilt {
            // first difference: +6 dB per octave
            s += tilt_gain * (low - prev_low);
        }
        prev_low = low;
        if wheeze {
            let w = (std::f64::consts::TAU * wheeze_hz * k / sr + phase).sin();
            s += wheeze_amp * (w + 0.3 * (2.0 * (std::f64::consts::TAU * wheeze_hz * k / sr + phase)).sin());
        }
        *out = env * s + background;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let samples = x
        .iter()
        .map(|&v| dequantize(quantize((gain * v / peak) as f32)))
        .collect();
    AudioSignal::new(samples, SAMPLE_RATE)
}
