//! Differentiable networks: a small reverse-mode autodiff engine, the
//! transformer acoustic model and the cycle predictor.

mod gradcheck;
mod graph;
mod layers;
mod model;
mod params;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv1d, LayerNorm, Linear, SelfAttention, TransformerBlock, LAYER_NORM_EPS};
pub use model::{
    length_regulate, positional_encoding, AcousticModel, ModelConfig, Networks, PredictorModule,
    PITCH_VOCAB,
};
pub use params::{init_normal, init_uniform, snap_slice, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unhealthy gradient: {0}")]
    Gradient(String),
}
