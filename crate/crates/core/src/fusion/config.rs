use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which branches feed the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Fused,
    TabularOnly,
    AudioOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width shared by both branches.
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub conv_channels: [usize; 3],
    pub kernels: [usize; 3],
    pub cmbca_max_iters: usize,
    /// Per-sample convergence threshold on the L2 norm of each update.
    pub cmbca_tol: f64,
    /// Tabular width including the appended boosted-tree probability.
    pub tab_dim: usize,
    pub in_channels: usize,
    pub in_frames: usize,
    pub modality: Modality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            d_ff: 256,
            dropout: 0.1,
            conv_channels: [32, 64, 128],
            kernels: [5, 5, 3],
            cmbca_max_iters: 3,
            cmbca_tol: 1e-4,
            tab_dim: 13,
            in_channels: 69,
            in_frames: 98,
            modality: Modality::Fused,
        }
    }
}

/// Output length of a width-2, stride-2 max pool that keeps an odd tail.
pub fn pooled_len(t: usize) -> usize {
    t.div_ceil(2)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_channels.contains(&0) || self.kernels.contains(&0) {
            return bad("conv channels and kernels must be positive".into());
        }
        if self.cmbca_max_iters == 0 {
            return bad("cmbca_max_iters must be at least 1".into());
        }
        if !(self.cmbca_tol > 0.0) {
            return bad("cmbca_tol must be positive".into());
        }
        if self.tab_dim == 0 || self.in_channels == 0 || self.in_frames == 0 {
            return bad("input dimensions must be positive".into());
        }
        Ok(())
    }

    /// Frames left after the three pooling stages.
    pub fn pooled_frames(&self) -> usize {
        pooled_len(pooled_len(pooled_len(self.in_frames)))
    }

    /// Width of the flattened audio feature fed to the audio dense layer.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[2] * self.pooled_frames()
    }

    pub fn uses_audio(&self) -> bool {
        self.modality != Modality::TabularOnly
    }

    pub fn uses_tabular(&self) -> bool {
        self.modality != Modality::AudioOnly
    }
}
