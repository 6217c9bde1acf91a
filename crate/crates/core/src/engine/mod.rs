//! Minimal reverse-mode differentiable tensor engine.
//!
//! Values are `f32`, row-major. A [`Tape`] records one forward pass; the
//! trainable state lives in a [`ParameterSet`] that is loaded onto the tape
//! with [`Tape::param`] and receives adjoints via [`Tape::backward_into`].

mod nn;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use nn::{
    global_avg_pool, linear, lstm_step, max_over_steps, multi_head_attention, AdditiveAttention,
    AttentionProjections, LstmWeights,
};
pub use params::{ParamGroup, ParamId, Parameter, ParameterSet};
pub use tape::{
    Binary, Gradients, Mode, RunningStats, Tape, Unary, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
    LAYER_NORM_EPS, MASK_SENTINEL,
};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
