//! Embedding index, semantic search, zero-shot classification, metrics and
//! linear probing.

mod classify;
mod eval;
mod index;
mod metrics;
mod probe;

use thiserror::Error;

pub use classify::{
    classify_abc, encode_abc, zero_shot_batch, zero_shot_classify, zero_shot_from_scores, Classification,
    LabelPrompt, LabelPromptSet, LabelScore, BUNDLED_PROMPT_SETS,
};
pub use eval::{eval_classification, eval_search, ClassificationReport, EvalReport, SearchReport};
pub use index::{build_index, meta_path, search, EmbeddingIndex, IndexRecord, RankedResult, SearchHit};
pub use metrics::{f1_macro, hr_at_k, mrr, random_mrr, random_mrr_std};
pub use probe::{assign_folds, linear_probe, FoldReport, ProbeConfig, ProbeReport};

use crate::contrastive::ClampError;
use crate::corpus::CorpusError;
use crate::nn::NnError;
use crate::patch::PatchError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("the index is empty")]
    EmptyIndex,
    #[error("metric input is empty")]
    EmptyInput,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("zero-shot classification needs at least 2 labels, got {0}")]
    DegenerateLabelSet(usize),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("length mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("piece {0} is not in the index")]
    MissingTarget(String),
    #[error("index dimension {index} does not match model dimension {model}")]
    ConfigMismatch { index: usize, model: usize },
    #[error("bad index file: {0}")]
    Format(String),
    #[error("unknown prompt set {0}")]
    UnknownPromptSet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Clamp(#[from] ClampError),
}
