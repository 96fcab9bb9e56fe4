//! Minimal differentiable computation layer: autodiff graph, transformer
//! encoders, the M3 character decoder, AdamW, gradient checking and
//! checkpoints. Everything computes in f64; checkpoints store f32.

mod checkpoint;
mod config;
pub mod gradcheck;
pub mod graph;
mod layers;
mod model;
mod optim;
mod params;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelKind};
pub use config::{ModelConfig, OptimizerConfig};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{contrastive_loss_and_grad, ContrastiveVariant, Grads, Graph, SeqLayout, Var};
pub use layers::{CharDecoder, EncoderOutput, MusicEncoder, TextEncoder, TransformerStack};
pub use model::{ClampModel, M3Model};
pub use optim::AdamW;
pub use params::ParamStore;

pub type Mat = ndarray::Array2<f64>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("sequence of {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("every position of a sequence is masked; nothing to pool")]
    EmptyPool,
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite input features")]
    NonFiniteInput,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
