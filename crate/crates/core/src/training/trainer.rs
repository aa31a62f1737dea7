use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tbscreen_nn::{Graph, Mode};

use super::loss::{batch_loss, TrblConfig};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::bundle::ModelBundle;
use crate::data::{Dataset, Sample};
use crate::dsp::{ChannelGroup, ChannelLayout, ChannelStats, DspConfig, FeatureMap};
use crate::error::{CoreError, Result};
use crate::evaluation::{confusion_metrics, MetricReport, DEFAULT_THRESHOLD};
use crate::fusion::{FusionModel, ModelConfig};
use crate::gbdt::{cvpem_split, stratified_partition, GbdtParams};
use crate::tabular::{feature_index, TabularRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Outer cross-validation folds.
    pub folds: usize,
    /// Folds of the probability embedding inside each training split.
    pub inner_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr_init: 1e-3,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 5,
            inner_folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!("need 0 <= lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid AdamW moment settings".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.folds < 2 || self.inner_folds < 2 {
            return bad("fold counts must be at least 2".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Every tunable of a run, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dsp: DspConfig,
    pub gbdt: GbdtParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub trbl: TrblConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.gbdt.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.trbl.validate()
    }
}

/// Inputs withheld from a run: tabular columns and acoustic channel groups.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub columns: Vec<usize>,
    pub groups: Vec<ChannelGroup>,
}

impl Exclusion {
    pub fn none() -> Self {
        Self::default()
    }

    /// Resolves a display name to a tabular column or channel group.
    pub fn feature(name: &str) -> Result<Self> {
        if let Some(i) = feature_index(name) {
            return Ok(Self {
                columns: vec![i],
                groups: Vec::new(),
            });
        }
        if let Some(g) = ChannelGroup::from_name(name) {
            return Ok(Self {
                columns: Vec::new(),
                groups: vec![g],
            });
        }
        Err(CoreError::UnknownFeature(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Absent when the validation split holds a single class.
    pub val_auroc: Option<f64>,
    pub val_f1: Option<f64>,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,val_auroc,val_f1,lr")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.val_loss,
                opt(e.val_auroc),
                opt(e.val_f1),
                e.lr
            )?;
        }
        Ok(())
    }
}

/// Which patients touched which fitted quantity during one fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    /// Records any boosted-tree model of the embedding was fitted on.
    pub embedding_ids: BTreeSet<String>,
    /// Records pooled into the channel normalization statistics.
    pub channel_stat_ids: BTreeSet<String>,
    /// Records that appeared in a training batch (and so in batch-norm
    /// statistics).
    pub batch_ids: BTreeSet<String>,
}

impl FoldAudit {
    /// Validation ids that reached any fitted quantity.
    pub fn leaked_ids(&self) -> Vec<String> {
        self.val_ids
            .iter()
            .filter(|id| {
                self.embedding_ids.contains(*id) || self.channel_stat_ids.contains(*id) || self.batch_ids.contains(*id)
            })
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub history: TrainHistory,
    pub bundle: ModelBundle,
    pub val_ids: Vec<String>,
    pub val_labels: Vec<u8>,
    pub val_probs: Vec<f64>,
    pub report: Option<MetricReport>,
    pub audit: FoldAudit,
}

#[derive(Clone, Debug)]
pub struct CvRun {
    pub folds: Vec<FoldResult>,
}

impl CvRun {
    /// Per-fold held-out AUROC (folds with one class are skipped).
    pub fn aurocs(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.report.map(|r| r.auroc)).collect()
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.folds.iter().filter_map(|f| f.report).collect()
    }
}

/// SplitMix64 step: decorrelated child seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits a shuffled order into batches. A trailing batch of one sample is
/// folded into the previous batch, because batch norm needs two rows.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn check_fold_inputs(data: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<()> {
    if train_idx.len() < 2 {
        return Err(CoreError::Empty("training split needs at least two samples".into()));
    }
    if val_idx.is_empty() {
        return Err(CoreError::Empty("empty validation split".into()));
    }
    let n = data.len();
    if let Some(&i) = train_idx.iter().chain(val_idx).find(|&&i| i >= n) {
        return Err(CoreError::InvalidConfig(format!("sample index {i} out of range")));
    }
    let train: BTreeSet<_> = train_idx.iter().collect();
    if val_idx.iter().any(|i| train.contains(i)) {
        return Err(CoreError::InvalidConfig("train and validation splits overlap".into()));
    }
    Ok(())
}

/// Trains one model on `train_idx` and evaluates it on `val_idx`.
pub fn train_fold(
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &PipelineConfig,
    exclusion: &Exclusion,
    fold: usize,
    seed: u64,
) -> Result<FoldResult> {
    cfg.validate()?;
    check_fold_inputs(data, train_idx, val_idx)?;
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &data.samples[i]).collect();
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data.samples[i]).collect();
    let train_labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let ids = |xs: &[&Sample]| -> BTreeSet<String> { xs.iter().map(|s| s.record.patient_id.clone()).collect() };

    // Tabular side: probability embedding fitted on the training split only.
    let strip = |xs: &[&Sample]| -> Vec<TabularRecord> {
        xs.iter().map(|s| s.record.without_columns(&exclusion.columns)).collect()
    };
    let (train_recs, val_recs) = (strip(&train), strip(&val));
    let emb = cvpem_split(
        &train_recs,
        &train_labels,
        &val_recs,
        cfg.train.inner_folds,
        &cfg.gbdt,
        derive_seed(seed, 1),
    )?;
    let mut embedding_ids: BTreeSet<String> = emb.full_train_ids.iter().cloned().collect();
    for fold_ids in &emb.inner.fold_train_ids {
        embedding_ids.extend(fold_ids.iter().cloned());
    }

    // Audio side: normalization fitted on training recordings only.
    let layout = ChannelLayout::new(&data.dsp);
    let kept_channels = layout.kept_channels(&exclusion.groups);
    let channel_stats = ChannelStats::fit(train.iter().map(|s| &s.audio))?;

    let model_cfg = ModelConfig {
        tab_dim: train_recs[0].dim() + 1,
        in_channels: kept_channels.len(),
        in_frames: data.dsp.target_frames,
        ..cfg.model.clone()
    };
    let mut bundle = ModelBundle {
        dsp: data.dsp.clone(),
        channel_stats,
        kept_channels,
        dropped_columns: exclusion.columns.clone(),
        gbdt: emb.full_model.clone(),
        model: FusionModel::new(model_cfg, derive_seed(seed, 2))?,
    };
    let uses_audio = bundle.model.cfg.uses_audio();
    let uses_tab = bundle.model.cfg.uses_tabular();
    let maps_of = |xs: &[&Sample]| -> Vec<FeatureMap> {
        if uses_audio {
            xs.iter().map(|s| bundle.audio_input(&s.audio)).collect()
        } else {
            Vec::new()
        }
    };
    let (train_maps, val_maps) = (maps_of(&train), maps_of(&val));
    let tabs_of = |xs: &[crate::tabular::EnhancedTabular]| -> Vec<Vec<f64>> {
        if uses_tab {
            xs.iter().map(|e| e.vector()).collect()
        } else {
            Vec::new()
        }
    };
    let (train_tabs, val_tabs) = (tabs_of(&emb.train), tabs_of(&emb.holdout));

    let tc = &cfg.train;
    let lambda = cfg.trbl.effective_lambda() as f32;
    let clamp = cfg.trbl.clamp_eps as f32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut dropout_rng = Some(ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)));
    let steps_per_epoch = make_batches(&order, tc.batch_size).len();
    let total_steps = tc.epochs * steps_per_epoch;
    let mut opt = AdamW::new(tc.adamw());
    let mut history = TrainHistory::default();
    let mut batch_ids = BTreeSet::new();
    let mut step = 0;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = cosine_lr(step, total_steps, tc.lr_init, tc.lr_min);
        let mut loss_sum = 0.0;
        for batch in make_batches(&order, tc.batch_size) {
            let lr = cosine_lr(step, total_steps, tc.lr_init, tc.lr_min);
            let maps: Vec<&FeatureMap> = if uses_audio { batch.iter().map(|&i| &train_maps[i]).collect() } else { Vec::new() };
            let tabs: Vec<&[f64]> = if uses_tab {
                batch.iter().map(|&i| train_tabs[i].as_slice()).collect()
            } else {
                Vec::new()
            };
            let labels: Vec<u8> = batch.iter().map(|&i| train_labels[i]).collect();
            if epoch == 0 {
                batch_ids.extend(batch.iter().map(|&i| train[i].record.patient_id.clone()));
            }
            let mut g = Graph::with_rng(Mode::Train, dropout_rng.take().expect("rng returned each step"));
            let (a, t) = bundle.model.inputs(&mut g, &maps, &tabs)?;
            let fp = bundle.model.forward(&mut g, a, t)?;
            let loss = g.trbl_loss(fp.probs, &labels, lambda, clamp)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(CoreError::Diverged { epoch });
            }
            let grads = g.backward(loss)?;
            let observations = g.take_bn_observations();
            dropout_rng = g.take_rng();
            opt.step(&mut bundle.model.params, &grads, lr);
            bundle.model.apply_bn_observations(observations)?;
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let (val_probs, val_loss) = evaluate_split(&bundle, &val_maps, &val_tabs, &val_labels, &cfg.trbl, epoch)?;
        let report = confusion_metrics(&val_labels, &val_probs, DEFAULT_THRESHOLD).ok();
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_auroc: report.map(|r| r.auroc),
            val_f1: report.map(|r| r.f1),
            lr: epoch_lr,
        });
    }

    let (val_probs, _) = evaluate_split(&bundle, &val_maps, &val_tabs, &val_labels, &cfg.trbl, tc.epochs)?;
    let report = confusion_metrics(&val_labels, &val_probs, DEFAULT_THRESHOLD).ok();
    let audit = FoldAudit {
        train_ids: ids(&train),
        val_ids: ids(&val),
        embedding_ids,
        channel_stat_ids: ids(&train),
        batch_ids,
    };
    Ok(FoldResult {
        fold,
        history,
        bundle,
        val_ids: val.iter().map(|s| s.record.patient_id.clone()).collect(),
        val_labels,
        val_probs,
        report,
        audit,
    })
}

fn evaluate_split(
    bundle: &ModelBundle,
    maps: &[FeatureMap],
    tabs: &[Vec<f64>],
    labels: &[u8],
    trbl: &TrblConfig,
    epoch: usize,
) -> Result<(Vec<f64>, f64)> {
    let preds = bundle.predict_prepared(maps, tabs)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.risk()).collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(CoreError::Diverged { epoch });
    }
    let loss = batch_loss(labels, &probs, trbl)?;
    Ok((probs, loss))
}

/// Stratified K-fold training. Folds run in parallel; each fold's
/// randomness comes from a seed derived from the run seed and fold index,
/// so results do not depend on scheduling.
pub fn cross_validate(data: &Dataset, cfg: &PipelineConfig, exclusion: &Exclusion) -> Result<CvRun> {
    cfg.validate()?;
    let labels = data.labels();
    let folds = stratified_partition(&labels, cfg.train.folds, cfg.train.seed)?;
    let results = (0..folds.k)
        .into_par_iter()
        .map(|k| {
            train_fold(
                data,
                &folds.complement(k),
                &folds.members(k),
                cfg,
                exclusion,
                k,
                derive_seed(cfg.train.seed, 100 + k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun { folds: results })
}
