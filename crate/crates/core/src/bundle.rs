//! Trained model bundle: everything needed to score one patient, plus the
//! single-file container it is persisted in.
//!
//! Container layout: magic `TBBUNDLE`, `u32` LE format version, `u64` LE
//! manifest length, manifest JSON, then the component payloads in manifest
//! order. The manifest records each component's size and SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tbscreen_nn::checkpoint::{read_checkpoint, write_checkpoint};

use crate::data::Sample;
use crate::dsp::{AudioSignal, ChannelStats, DspConfig, FeatureExtractor, FeatureMap, RawFeatures};
use crate::error::{CoreError, Result};
use crate::fusion::{FusionModel, ModelConfig, Prediction};
use crate::gbdt::TreeEnsemble;
use crate::tabular::{EnhancedTabular, TabularRecord};

pub const BUNDLE_MAGIC: &[u8; 8] = b"TBBUNDLE";
pub const BUNDLE_VERSION: u32 = 1;

/// Samples per inference batch.
const PREDICT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dsp: DspConfig,
    pub channel_stats: ChannelStats,
    /// Feature-map channels fed to the network, as indices into the full
    /// channel layout.
    pub kept_channels: Vec<usize>,
    /// Tabular columns removed before boosting and fusion.
    pub dropped_columns: Vec<usize>,
    pub gbdt: TreeEnsemble,
    pub model: FusionModel<f32>,
}

/// Scalar configuration stored alongside the weights.
#[derive(Serialize, Deserialize)]
struct BundleConfig {
    dsp: DspConfig,
    model: ModelConfig,
    channel_stats: ChannelStats,
    kept_channels: Vec<usize>,
    dropped_columns: Vec<usize>,
    zeroed_channels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentEntry {
    name: String,
    size: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    components: Vec<ComponentEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn corrupt(msg: impl Into<String>) -> CoreError {
    CoreError::CorruptBundle(msg.into())
}

impl ModelBundle {
    /// Normalized, frame-fitted, channel-selected network input.
    pub fn audio_input(&self, raw: &RawFeatures) -> FeatureMap {
        let map = FeatureMap::from_raw(raw, &self.channel_stats, self.dsp.target_frames);
        if self.kept_channels.len() == map.n_channels {
            map
        } else {
            map.select_channels(&self.kept_channels)
        }
    }

    /// Tabular record with ablated columns removed and the boosted-tree
    /// probability attached.
    pub fn enhance(&self, record: &TabularRecord) -> Result<EnhancedTabular> {
        let base = record.without_columns(&self.dropped_columns);
        let p_gbm = self.gbdt.predict_record(&base)?;
        Ok(EnhancedTabular { base, p_gbm })
    }

    pub fn predict_prepared(&self, maps: &[FeatureMap], tabs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        let n = maps.len().max(tabs.len());
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(PREDICT_BATCH) {
            let end = (start + PREDICT_BATCH).min(n);
            let m: Vec<&FeatureMap> = maps.get(start..end).unwrap_or(&[]).iter().collect();
            let t: Vec<&[f64]> = tabs.get(start..end).unwrap_or(&[]).iter().map(|v| v.as_slice()).collect();
            out.extend(self.model.predict(&m, &t)?);
        }
        Ok(out)
    }

    /// Batched predictions for featurized samples.
    pub fn predict_samples(&self, samples: &[&Sample]) -> Result<Vec<Prediction>> {
        let maps: Vec<FeatureMap> = if self.model.cfg.uses_audio() {
            samples.iter().map(|s| self.audio_input(&s.audio)).collect()
        } else {
            Vec::new()
        };
        let tabs: Vec<Vec<f64>> = if self.model.cfg.uses_tabular() {
            samples
                .iter()
                .map(|s| Ok(self.enhance(&s.record)?.vector()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        self.predict_prepared(&maps, &tabs)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec_pretty(&BundleConfig {
            dsp: self.dsp.clone(),
            model: self.model.cfg.clone(),
            channel_stats: self.channel_stats.clone(),
            kept_channels: self.kept_channels.clone(),
            dropped_columns: self.dropped_columns.clone(),
            zeroed_channels: self.model.zeroed_channels.clone(),
        })?;
        let gbdt = self.gbdt.to_json()?.into_bytes();
        let mut weights = Vec::new();
        write_checkpoint(&self.model.params, &mut weights)?;
        let parts = [("config.json", config), ("gbdt.json", gbdt), ("weights.dgtb", weights)];
        let manifest = Manifest {
            format_version: BUNDLE_VERSION,
            components: parts
                .iter()
                .map(|(name, bytes)| ComponentEntry {
                    name: name.to_string(),
                    size: bytes.len() as u64,
                    sha256: sha256_hex(bytes),
                })
                .collect(),
        };
        let manifest = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, bytes) in &parts {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != BUNDLE_MAGIC {
            return Err(corrupt("missing bundle header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != BUNDLE_VERSION {
            return Err(CoreError::UnsupportedVersion(version));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(corrupt("manifest version disagrees with header"));
        }
        let mut rest = &body[mlen..];
        // components are laid out in manifest order
        let mut payloads = Vec::new();
        for c in &manifest.components {
            let size = c.size as usize;
            if size > rest.len() {
                return Err(corrupt(format!("component {} truncated", c.name)));
            }
            let (head, tail) = rest.split_at(size);
            if sha256_hex(head) != c.sha256 {
                return Err(corrupt(format!("hash mismatch in {}", c.name)));
            }
            payloads.push((c.name.as_str(), head));
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes after components"));
        }
        let get = |name: &str| {
            payloads
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, b)| *b)
                .ok_or_else(|| corrupt(format!("component {name} missing")))
        };
        let cfg: BundleConfig =
            serde_json::from_slice(get("config.json")?).map_err(|e| corrupt(format!("config: {e}")))?;
        let gbdt_json =
            std::str::from_utf8(get("gbdt.json")?).map_err(|_| corrupt("gbdt component is not UTF-8"))?;
        let gbdt = TreeEnsemble::from_json(gbdt_json)?;
        let params = read_checkpoint::<f32, _>(get("weights.dgtb")?).map_err(|e| corrupt(format!("weights: {e}")))?;
        cfg.model.validate()?;
        Ok(Self {
            dsp: cfg.dsp,
            channel_stats: cfg.channel_stats,
            kept_channels: cfg.kept_channels,
            dropped_columns: cfg.dropped_columns,
            gbdt,
            model: FusionModel {
                cfg: cfg.model,
                params,
                zeroed_channels: cfg.zeroed_channels,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Result of scoring one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub prediction: Prediction,
    pub p_gbm: f64,
    /// The recording was digital silence; the score rests on the tabular
    /// side alone.
    pub silent: bool,
}

/// A bundle plus a ready feature extractor, for end-to-end scoring of raw
/// audio and tabular input.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub bundle: ModelBundle,
    extractor: FeatureExtractor,
}

impl Scorer {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        let extractor = FeatureExtractor::new(&bundle.dsp)?;
        Ok(Self { bundle, extractor })
    }

    pub fn score(&self, signal: &AudioSignal, record: &TabularRecord) -> Result<Scored> {
        let raw = self.extractor.extract(signal)?;
        let enhanced = self.bundle.enhance(record)?;
        let map = self.bundle.audio_input(&raw);
        let maps = if self.bundle.model.cfg.uses_audio() { vec![map] } else { Vec::new() };
        let tabs = if self.bundle.model.cfg.uses_tabular() {
            vec![enhanced.vector()]
        } else {
            Vec::new()
        };
        let prediction = self.bundle.predict_prepared(&maps, &tabs)?.remove(0);
        Ok(Scored {
            prediction,
            p_gbm: enhanced.p_gbm,
            silent: raw.silent,
        })
    }
}
