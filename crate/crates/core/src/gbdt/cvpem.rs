//! Out-of-fold boosted-tree probabilities appended to tabular features.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::booster::{fit_gbdt, TreeEnsemble};
use super::GbdtParams;
use crate::error::{CoreError, Result};
use crate::tabular::{EnhancedTabular, TabularRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Fold index of each record, by input position.
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Stratified K-fold split. Positives and negatives are shuffled
/// separately, laid end to end, and dealt to folds round-robin, so every
/// fold's class counts differ from any other's by at most one.
pub fn stratified_partition(labels: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = labels.len();
    if k < 2 {
        return Err(CoreError::CannotStratify(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(CoreError::CannotStratify(format!("{n} samples for {k} folds")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(CoreError::InvalidLabel(bad as f64));
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(CoreError::CannotStratify("labels contain a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        fold_of[i] = slot % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

fn check_unique<'a>(records: impl IntoIterator<Item = &'a TabularRecord>) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.patient_id.as_str()) {
            return Err(CoreError::AmbiguousMerge(r.patient_id.clone()));
        }
    }
    Ok(())
}

/// Training-set membership of every model that produced a probability,
/// for auditing the out-of-fold property.
#[derive(Clone, Debug, Default)]
pub struct CvpemTrace {
    /// Patient ids each fold model was trained on, indexed by fold.
    pub fold_train_ids: Vec<Vec<String>>,
    /// Fold whose model scored each input record.
    pub scored_by: Vec<usize>,
}

impl CvpemTrace {
    /// True when no record was scored by a model that saw it in training.
    pub fn is_out_of_fold(&self, records: &[TabularRecord]) -> bool {
        records.iter().zip(&self.scored_by).all(|(r, &f)| {
            !self.fold_train_ids[f].contains(&r.patient_id)
        })
    }
}

#[derive(Clone, Debug)]
pub struct CvpemOutput {
    pub embedded: Vec<EnhancedTabular>,
    pub folds: FoldAssignment,
    pub trace: CvpemTrace,
}

/// Out-of-fold embedding: the record in fold `k` is scored by the
/// ensemble trained on all other folds. Output order matches input order.
pub fn cvpem_embed(
    records: &[TabularRecord],
    labels: &[u8],
    k: usize,
    params: &GbdtParams,
    seed: u64,
) -> Result<CvpemOutput> {
    check_unique(records)?;
    if records.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            expected: records.len(),
            got: labels.len(),
        });
    }
    let folds = stratified_partition(labels, k, seed)?;
    let mut p = vec![0.0; records.len()];
    let mut trace = CvpemTrace {
        fold_train_ids: Vec::with_capacity(k),
        scored_by: folds.fold_of.clone(),
    };
    for f in 0..k {
        let train = folds.complement(f);
        let tr: Vec<TabularRecord> = train.iter().map(|&i| records[i].clone()).collect();
        let tl: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_gbdt(&tr, &tl, params)?;
        for i in folds.members(f) {
            p[i] = model.predict_record(&records[i])?;
        }
        trace.fold_train_ids.push(tr.into_iter().map(|r| r.patient_id).collect());
    }
    let embedded = records
        .iter()
        .zip(p)
        .map(|(r, p_gbm)| EnhancedTabular {
            base: r.clone(),
            p_gbm,
        })
        .collect();
    Ok(CvpemOutput { embedded, folds, trace })
}

/// Embedding for a train/holdout split: training records get out-of-fold
/// probabilities from an inner K-fold over the training split only, and
/// holdout records are scored by an ensemble fit on the whole training
/// split. Holdout labels are never needed.
pub struct SplitEmbedding {
    pub train: Vec<EnhancedTabular>,
    pub holdout: Vec<EnhancedTabular>,
    pub inner: CvpemTrace,
    pub full_model: TreeEnsemble,
    pub full_train_ids: Vec<String>,
}

pub fn cvpem_split(
    train: &[TabularRecord],
    train_labels: &[u8],
    holdout: &[TabularRecord],
    k: usize,
    params: &GbdtParams,
    seed: u64,
) -> Result<SplitEmbedding> {
    check_unique(train.iter().chain(holdout))?;
    let inner = cvpem_embed(train, train_labels, k, params, seed)?;
    let full_model = fit_gbdt(train, train_labels, params)?;
    let holdout = holdout
        .iter()
        .map(|r| {
            Ok(EnhancedTabular {
                base: r.clone(),
                p_gbm: full_model.predict_record(r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitEmbedding {
        train: inner.embedded,
        holdout,
        inner: inner.trace,
        full_model,
        full_train_ids: train.iter().map(|r| r.patient_id.clone()).collect(),
    })
}
