//! Minimal dense-tensor and reverse-mode differentiation core.
//!
//! The [`Graph`] records forward operations on a tape; [`Graph::backward`]
//! walks the tape once in reverse. Layers in [`layers`] bind graph ops to
//! named tensors in a [`ParamStore`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{softmax_in_place, BnObservation, Grads, Graph, Mode, Var};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
