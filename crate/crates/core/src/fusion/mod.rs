//! The two-branch fusion network and its cross-modal attention exchange.

mod config;
mod model;

pub use config::{pooled_len, Modality, ModelConfig};
pub use model::{cm_bca, init_cmbca_side, CmBcaOutput, CmBcaSettings, ForwardPass, FusionModel, Prediction};
