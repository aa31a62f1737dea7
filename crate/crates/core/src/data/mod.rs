//! Cohort ingestion, synthetic cohorts, and the in-memory training dataset.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{wav, AudioSignal, DspConfig, FeatureExtractor, RawFeatures};
use crate::error::{CoreError, Result};
use crate::tabular::{TabularRecord, FEATURE_KEYS};

pub use synth::{synth_cohort, Rate, SynthConfig};

/// Cohort CSV header, in order.
pub const COHORT_HEADER: [&str; 15] = [
    "patient_id",
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
    "label",
    "audio_filename",
];

pub const COHORT_CSV: &str = "cohort.csv";
pub const AUDIO_DIR: &str = "audio";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortRecord {
    pub record: TabularRecord,
    pub label: u8,
    pub audio_file: String,
    pub audio: AudioSignal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<CohortRecord>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(CoreError::EmptyCohort);
        }
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.record.patient_id.as_str()) {
                problems.push(format!("record {i}: duplicate patient_id {}", r.record.patient_id));
            }
            if r.label > 1 {
                problems.push(format!("record {i}: label {} not in {{0,1}}", r.label));
            }
            if r.record.dim() != FEATURE_KEYS.len() {
                problems.push(format!("record {i}: {} tabular values", r.record.dim()));
            }
            if r.audio.samples.is_empty() {
                problems.push(format!("record {i}: empty audio"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::CohortValidation(problems))
        }
    }

    /// Writes `cohort.csv` plus one PCM16 WAV per record under `audio/`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(AUDIO_DIR))?;
        let mut w = csv::Writer::from_path(dir.join(COHORT_CSV)).map_err(csv_err)?;
        w.write_record(COHORT_HEADER).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.record.patient_id.clone()];
            row.extend(r.record.features.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            row.push(r.label.to_string());
            row.push(r.audio_file.clone());
            w.write_record(&row).map_err(csv_err)?;
            wav::write_wav(&dir.join(AUDIO_DIR).join(&r.audio_file), &r.audio)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::CohortValidation(vec![e.to_string()])
}

/// Loads a cohort CSV and its WAV files. Every problem found is reported
/// together and nothing is returned unless the whole cohort is valid.
pub fn load_cohort(csv_path: &Path, audio_dir: &Path) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| CoreError::CohortValidation(vec![format!("{}: {e}", csv_path.display())]))?;
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != COHORT_HEADER {
        return Err(CoreError::CohortValidation(vec![format!(
            "header {header:?} does not match expected {COHORT_HEADER:?}"
        )]));
    }
    let mut problems = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        if row.len() != COHORT_HEADER.len() {
            problems.push(format!("row {line}: {} fields, expected {}", row.len(), COHORT_HEADER.len()));
            continue;
        }
        let id = row[0].to_string();
        if id.is_empty() {
            problems.push(format!("row {line}: empty patient_id"));
        } else if !seen.insert(id.clone()) {
            problems.push(format!("row {line}: duplicate patient_id {id}"));
        }
        let mut features = Vec::with_capacity(FEATURE_KEYS.len());
        for (j, key) in FEATURE_KEYS.iter().enumerate() {
            let s = &row[j + 1];
            if s.is_empty() {
                features.push(f64::NAN);
            } else {
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => features.push(v),
                    _ => problems.push(format!("row {line}: {key} value {s:?} is not a number")),
                }
            }
        }
        let label = match &row[13] {
            "0" => Some(0),
            "1" => Some(1),
            other => {
                problems.push(format!("row {line}: label {other:?} not in {{0,1}}"));
                None
            }
        };
        let file = row[14].to_string();
        let path = audio_dir.join(&file);
        let audio = if file.is_empty() {
            problems.push(format!("row {line}: empty audio_filename"));
            None
        } else if !path.is_file() {
            problems.push(format!("row {line}: audio file {} not found", path.display()));
            None
        } else {
            match wav::read_wav(&path) {
                Ok(a) => Some(a),
                Err(e) => {
                    problems.push(format!("row {line}: {}: {e}", path.display()));
                    None
                }
            }
        };
        if let (Some(label), Some(audio), true) = (label, audio, features.len() == FEATURE_KEYS.len()) {
            rows.push(CohortRecord {
                record: TabularRecord::new(id, features),
                label,
                audio_file: file,
                audio,
            });
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::CohortValidation(problems));
    }
    if rows.is_empty() {
        return Err(CoreError::EmptyCohort);
    }
    Ok(Cohort {
        records: rows,
        provenance: Provenance::Real,
    })
}

/// Loads `cohort.csv` and `audio/` from a directory written by
/// [`Cohort::write_dir`].
pub fn load_cohort_dir(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join(COHORT_CSV), &dir.join(AUDIO_DIR))
}

/// A record with its audio already reduced to raw frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: TabularRecord,
    pub label: u8,
    pub audio: RawFeatures,
}

/// Training-ready view of a cohort. Audio is featurized once; per-fold
/// normalization happens later.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dsp: DspConfig,
}

impl Dataset {
    pub fn from_cohort(cohort: &Cohort, dsp: &DspConfig) -> Result<Self> {
        cohort.validate()?;
        let fx = FeatureExtractor::new(dsp)?;
        let samples = cohort
            .records
            .par_iter()
            .map(|r| {
                Ok(Sample {
                    record: r.record.clone(),
                    label: r.label,
                    audio: fx.extract(&r.audio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            dsp: dsp.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            dsp: self.dsp.clone(),
        }
    }
}
