//! Risk-balanced loss, AdamW with cosine annealing, and cross-validated
//! training of the fusion network.

mod loss;
mod optim;
mod trainer;

pub use loss::{batch_loss, trbl, trbl_grad, LossKind, TrblConfig};
pub use optim::{adamw_update, cosine_lr, AdamW, AdamWConfig, Moments};
pub use trainer::{
    cross_validate, derive_seed, make_batches, train_fold, CvRun, EpochRecord, Exclusion, FoldAudit, FoldResult,
    PipelineConfig, TrainConfig, TrainHistory,
};
