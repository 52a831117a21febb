//! Multilingual word-level LSTM language models with cross-lingual parameter
//! sharing and AWD-style regularization, built on a small reverse-mode
//! differentiation engine.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod checkpoint;
pub mod corpus;
pub mod kernels;
pub mod eval;
pub mod model;
pub mod mono;
pub mod params;
pub mod rng;
pub mod rnn;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, MaskMode, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
