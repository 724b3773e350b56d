//! Beat- and style-conditioned dance motion synthesis.

pub mod beats;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod motion;
pub mod training;

pub use error::{DanceError, Result};

/// Parameters in single precision, as used for training and inference.
pub type Params32 = dance_nn::ParamStore<f32>;
/// Parameters in double precision, as used for gradient checks.
pub type Params64 = dance_nn::ParamStore<f64>;
pub type Graph32<'a> = dance_nn::Graph<'a, f32>;
pub type Graph64<'a> = dance_nn::Graph<'a, f64>;
