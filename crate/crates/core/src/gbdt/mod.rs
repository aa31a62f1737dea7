//! Histogram gradient-boosted trees and the cross-validated probability
//! embedding built on them.

mod binning;
mod booster;
mod cvpem;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use binning::{BinMapper, MISSING_BIN};
pub use booster::{
    best_split, fit_gbdt, fit_rows, split_gain, GbdtFit, Node, SplitCandidate, Tree, TreeEnsemble, ENSEMBLE_VERSION,
};
pub use cvpem::{cvpem_embed, cvpem_split, stratified_partition, CvpemOutput, CvpemTrace, FoldAssignment, SplitEmbedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_leaf: usize,
    pub n_bins: usize,
    /// L2 penalty on leaf values.
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            learning_rate: 0.1,
            max_leaves: 31,
            min_leaf: 20,
            n_bins: 255,
            lambda_reg: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if self.max_leaves < 2 {
            return bad("max_leaves must be at least 2");
        }
        if !(2..=u16::MAX as usize - 1).contains(&self.n_bins) {
            return bad("n_bins must lie in [2, 65534]");
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1");
        }
        if !(self.lambda_reg >= 0.0) {
            return bad("lambda_reg must be non-negative");
        }
        Ok(())
    }
}
