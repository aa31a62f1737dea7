//! Multimodal tuberculosis risk scoring from cough audio and demographics.

pub mod bundle;
pub mod data;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gbdt;
pub mod stats;
pub mod tabular;
pub mod training;

pub use error::{CoreError, Result};
