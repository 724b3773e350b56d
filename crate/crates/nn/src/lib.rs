//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; [`grad_check`] re-runs graphs in `f64` against central
//! differences. Graph values are treated as matrices: the last axis is
//! `cols`, everything before it is flattened into `rows`.

pub mod checkpoint;
pub mod dropout;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointMeta};
pub use dropout::DropoutKey;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{AdamConfig, Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
