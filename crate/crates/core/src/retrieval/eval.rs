use serde::{Deserialize, Serialize};

use super::classify::{gold_labels, pair_sequences, zero_shot_batch, LabelPromptSet};
use super::index::EmbeddingIndex;
use super::metrics::{f1_macro, hr_at_k, mrr, random_mrr};
use super::probe::ProbeReport;
use super::RetrievalError;
use crate::contrastive::prepare_pairs;
use crate::corpus::MusicTextPair;
use crate::nn::ClampModel;
use crate::text::{join_all, TextTokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub queries: usize,
    pub index_size: usize,
    pub mrr: f64,
    pub hr_at_1: f64,
    pub hr_at_10: f64,
    pub hr_at_100: f64,
    /// `H(n) / n` for an index of `n` pieces.
    pub random_mrr: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<usize>,
}

impl SearchReport {
    pub fn from_ranks(ranks: Vec<usize>, index_size: usize) -> Result<Self, RetrievalError> {
        Ok(Self {
            queries: ranks.len(),
            index_size,
            mrr: mrr(&ranks)?,
            hr_at_1: hr_at_k(&ranks, 1)?,
            hr_at_10: hr_at_k(&ranks, 10)?,
            hr_at_100: hr_at_k(&ranks, 100)?,
            random_mrr: random_mrr(index_size),
            ranks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub field: String,
    pub count: usize,
    pub f1_macro: f64,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeReport>,
}

/// Ranks each pair's own piece under the query formed by joining all of its
/// candidate texts.
pub fn eval_search(
    index: &EmbeddingIndex,
    model: &ClampModel,
    pairs: &[MusicTextPair],
) -> Result<SearchReport, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    index.check_model(model)?;
    let targets = pairs
        .iter()
        .map(|p| {
            index
                .position(p.source_id())
                .ok_or_else(|| RetrievalError::MissingTarget(p.source_id().to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut ranks = Vec::with_capacity(pairs.len());
    for (chunk, chunk_targets) in pairs.chunks(32).zip(targets.chunks(32)) {
        let tokens: Vec<TextTokens> = chunk
            .iter()
            .map(|p| model.tokenize(&join_all(&p.candidate_texts)))
            .collect();
        let refs: Vec<&TextTokens> = tokens.iter().collect();
        let queries = model.text_features(&refs)?;
        for (row, &target) in queries.rows().into_iter().zip(chunk_targets) {
            ranks.push(index.rank_of(row.as_slice().expect("contiguous row"), target));
        }
    }
    SearchReport::from_ranks(ranks, index.len())
}

/// Zero-shot accuracy and F1-macro against the `field` label of each pair.
/// Pairs without that label are skipped.
pub fn eval_classification(
    model: &ClampModel,
    pairs: &[MusicTextPair],
    prompts: &LabelPromptSet,
    field: &str,
) -> Result<ClassificationReport, RetrievalError> {
    let labelled: Vec<MusicTextPair> = pairs
        .iter()
        .zip(gold_labels(pairs, field))
        .filter(|(_, l)| l.is_some())
        .map(|(p, _)| p.clone())
        .collect();
    if labelled.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let prepared = prepare_pairs(&labelled, model.config.max_patches)?;
    let results = zero_shot_batch(model, &pair_sequences(&prepared), prompts)?;
    let predictions: Vec<&str> = results.iter().map(|c| c.label.as_str()).collect();
    let gold: Vec<&str> = gold_labels(&labelled, field).into_iter().flatten().collect();
    let (f1, accuracy) = f1_macro(&predictions, &gold)?;
    Ok(ClassificationReport {
        field: field.to_string(),
        count: gold.len(),
        f1_macro: f1,
        accuracy,
        chance: 1.0 / prompts.len() as f64,
    })
}
