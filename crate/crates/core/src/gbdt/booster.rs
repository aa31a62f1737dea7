use serde::{Deserialize, Serialize};

use super::binning::{BinMapper, MISSING_BIN};
use super::GbdtParams;
use crate::error::{CoreError, Result};
use crate::tabular::TabularRecord;

pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// Bins `<= bin` go left.
        bin: u16,
        /// Raw-value form of the bin rule: `x <= threshold` goes left.
        threshold: f64,
        missing_left: bool,
        gain: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Binary tree stored as a node array rooted at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                    ..
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v <= *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// `(feature, bin, gain)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, u16, f64)> {
        match self.nodes.first()? {
            Node::Split { feature, bin, gain, .. } => Some((*feature, *bin, *gain)),
            Node::Leaf { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub version: u32,
    /// Log-odds of the training prevalence.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub params: GbdtParams,
    pub feature_names: Vec<String>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1) even for saturated margins.
const PROB_GUARD: f64 = 1e-15;

impl TreeEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(CoreError::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.margin(x)?).clamp(PROB_GUARD, 1.0 - PROB_GUARD))
    }

    pub fn predict_record(&self, record: &TabularRecord) -> Result<f64> {
        self.predict_proba(&record.features)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Versioned {
            version: u32,
        }
        let v: Versioned = serde_json::from_str(s)?;
        if v.version != ENSEMBLE_VERSION {
            return Err(CoreError::UnsupportedVersion(v.version));
        }
        Ok(serde_json::from_str(s)?)
    }
}

/// Second-order split gain with L2 leaf regularization.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub bin: u16,
    pub missing_left: bool,
    pub gain: f64,
}

/// Exhaustive histogram search over every `(feature, bin)` boundary and
/// both missing-value directions for the rows in `idx`.
pub fn best_split(
    binned: &[Vec<u16>],
    mapper: &BinMapper,
    grad: &[f64],
    hess: &[f64],
    idx: &[usize],
    params: &GbdtParams,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    let (g_tot, h_tot): (f64, f64) = idx.iter().fold((0.0, 0.0), |(g, h), &i| (g + grad[i], h + hess[i]));
    let n_tot = idx.len();
    for (j, col) in binned.iter().enumerate() {
        let nb = mapper.n_bins(j);
        if nb < 2 {
            continue;
        }
        let mut g = vec![0.0; nb];
        let mut h = vec![0.0; nb];
        let mut c = vec![0usize; nb];
        let (mut gm, mut hm, mut cm) = (0.0, 0.0, 0usize);
        for &i in idx {
            let b = col[i];
            if b == MISSING_BIN {
                gm += grad[i];
                hm += hess[i];
                cm += 1;
            } else {
                g[b as usize] += grad[i];
                h[b as usize] += hess[i];
                c[b as usize] += 1;
            }
        }
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
        for t in 0..nb - 1 {
            gl += g[t];
            hl += h[t];
            cl += c[t];
            for missing_left in [false, true] {
                if missing_left && cm == 0 {
                    continue;
                }
                let (gl2, hl2, cl2) = if missing_left { (gl + gm, hl + hm, cl + cm) } else { (gl, hl, cl) };
                let cr2 = n_tot - cl2;
                if cl2 < params.min_leaf || cr2 < params.min_leaf {
                    continue;
                }
                let gain = split_gain(gl2, hl2, g_tot - gl2, h_tot - hl2, params.lambda_reg);
                if gain > 0.0 && best.map_or(true, |b| gain > b.gain) {
                    best = Some(SplitCandidate {
                        feature: j,
                        bin: t as u16,
                        missing_left,
                        gain,
                    });
                }
            }
        }
    }
    best
}

struct OpenLeaf {
    node: usize,
    idx: Vec<usize>,
    split: Option<SplitCandidate>,
}

fn grow_tree(
    binned: &[Vec<u16>],
    mapper: &BinMapper,
    grad: &[f64],
    hess: &[f64],
    all: Vec<usize>,
    params: &GbdtParams,
) -> (Tree, Vec<(Vec<usize>, f64)>) {
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let split = best_split(binned, mapper, grad, hess, &all, params);
    let mut open = vec![OpenLeaf { node: 0, idx: all, split }];
    let mut n_leaves = 1;
    while n_leaves < params.max_leaves {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(k, l)| l.split.map(|s| (k, s.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (k, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((k, g)),
            });
        let Some((k, _)) = pick else { break };
        let leaf = open.swap_remove(k);
        let s = leaf.split.expect("picked leaf has a split");
        let col = &binned[s.feature];
        let (li, ri): (Vec<usize>, Vec<usize>) = leaf.idx.iter().partition(|&&i| {
            let b = col[i];
            if b == MISSING_BIN {
                s.missing_left
            } else {
                b <= s.bin
            }
        });
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[leaf.node] = Node::Split {
            feature: s.feature,
            bin: s.bin,
            threshold: mapper.thresholds[s.feature][s.bin as usize],
            missing_left: s.missing_left,
            gain: s.gain,
            left: l,
            right: r,
        };
        for (node, idx) in [(l, li), (r, ri)] {
            let split = best_split(binned, mapper, grad, hess, &idx, params);
            open.push(OpenLeaf { node, idx, split });
        }
        n_leaves += 1;
    }
    let mut leaves = Vec::with_capacity(open.len());
    for leaf in open {
        let (g, h) = leaf.idx.iter().fold((0.0, 0.0), |(g, h), &i| (g + grad[i], h + hess[i]));
        let value = -params.learning_rate * g / (h + params.lambda_reg);
        nodes[leaf.node] = Node::Leaf { value };
        leaves.push((leaf.idx, value));
    }
    (Tree { nodes }, leaves)
}

fn logloss(margin: &[f64], y: &[f64]) -> f64 {
    margin
        .iter()
        .zip(y)
        .map(|(&f, &yi)| {
            // log(1 + e^f) - y f, computed stably
            let softplus = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
            softplus - yi * f
        })
        .sum::<f64>()
        / y.len() as f64
}

/// Boosting result with the training log-loss before the first tree and
/// after every round.
#[derive(Clone, Debug)]
pub struct GbdtFit {
    pub ensemble: TreeEnsemble,
    pub train_logloss: Vec<f64>,
}

pub fn fit_gbdt(records: &[TabularRecord], labels: &[u8], params: &GbdtParams) -> Result<TreeEnsemble> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    Ok(fit_rows(&rows, labels, params)?.ensemble)
}

/// Logistic-loss boosting on raw feature rows.
pub fn fit_rows(rows: &[&[f64]], labels: &[u8], params: &GbdtParams) -> Result<GbdtFit> {
    params.validate()?;
    if rows.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            expected: rows.len(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(CoreError::InvalidLabel(bad as f64));
    }
    let n = rows.len();
    if n < 2 * params.min_leaf || n == 0 {
        return Err(CoreError::InvalidConfig(format!(
            "boosting needs at least {} samples, got {n}",
            (2 * params.min_leaf).max(1)
        )));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(CoreError::DimensionMismatch {
            expected: d,
            got: r.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(CoreError::SingleClass("boosting needs both classes".into()));
    }

    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let prevalence = positives as f64 / n as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();
    let mapper = BinMapper::fit(rows, params.n_bins);
    let binned = mapper.transform(rows);

    let mut margin = vec![base_score; n];
    let mut history = vec![logloss(&margin, &y)];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..params.n_trees {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            grad[i] = p - y[i];
            hess[i] = p * (1.0 - p);
        }
        let (tree, leaves) = grow_tree(&binned, &mapper, &grad, &hess, (0..n).collect(), params);
        if tree.root_split().is_none() {
            break;
        }
        for (idx, value) in leaves {
            for i in idx {
                margin[i] += value;
            }
        }
        history.push(logloss(&margin, &y));
        trees.push(tree);
    }
    Ok(GbdtFit {
        ensemble: TreeEnsemble {
            version: ENSEMBLE_VERSION,
            base_score,
            trees,
            params: params.clone(),
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        },
        train_logloss: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn logloss_at_zero_margin_is_ln2() {
        let l = logloss(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gain_is_zero_for_identical_children() {
        assert!(split_gain(1.0, 2.0, 1.0, 2.0, 0.0).abs() < 1e-15);
        assert!(split_gain(-3.0, 2.0, 3.0, 2.0, 1.0) > 0.0);
    }
}
