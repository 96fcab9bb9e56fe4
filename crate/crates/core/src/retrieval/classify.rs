//! Prompt-based zero-shot classification.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::contrastive::PreparedPair;
use crate::corpus::{parse_score, segment_bars, MusicTextPair};
use crate::nn::{ClampModel, Mat};
use crate::patch::{encode_score, PatchSequence};
use crate::text::TextTokens;

/// Names of the prompt sets shipped with the crate.
pub const BUNDLED_PROMPT_SETS: [&str; 3] = ["wikimt_genres", "vgmidi_emotions", "pianist8_composers"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPrompt {
    pub label: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPromptSet")]
pub struct LabelPromptSet {
    pub name: String,
    pub labels: Vec<LabelPrompt>,
}

#[derive(Deserialize)]
struct RawPromptSet {
    #[serde(default)]
    name: String,
    labels: Vec<LabelPrompt>,
}

impl TryFrom<RawPromptSet> for LabelPromptSet {
    type Error = RetrievalError;

    fn try_from(raw: RawPromptSet) -> Result<Self, Self::Error> {
        LabelPromptSet::new(raw.name, raw.labels)
    }
}

impl LabelPromptSet {
    /// Labels must be unique and prompts non-blank.
    pub fn new(name: impl Into<String>, labels: Vec<LabelPrompt>) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for entry in &labels {
            if !seen.insert(entry.label.as_str()) {
                return Err(RetrievalError::InvalidLabelSet(format!("duplicate label {}", entry.label)));
            }
            if entry.prompt.trim().is_empty() {
                return Err(RetrievalError::InvalidLabelSet(format!("empty prompt for {}", entry.label)));
            }
        }
        Ok(Self {
            name: name.into(),
            labels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn bundled(name: &str) -> Result<Self, RetrievalError> {
        let text = match name {
            "wikimt_genres" => include_str!("../../data/wikimt_genres.json"),
            "vgmidi_emotions" => include_str!("../../data/vgmidi_emotions.json"),
            "pianist8_composers" => include_str!("../../data/pianist8_composers.json"),
            other => return Err(RetrievalError::UnknownPromptSet(other.to_string())),
        };
        Ok(serde_json::from_str(text)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    /// Another label shares the top score; the earliest one wins.
    pub tie: bool,
    /// In label-set order.
    pub scores: Vec<LabelScore>,
}

/// Argmax over `scores` (aligned with `prompts.labels`), first label on ties.
pub fn zero_shot_from_scores(prompts: &LabelPromptSet, scores: &[f64]) -> Result<Classification, RetrievalError> {
    if prompts.len() < 2 {
        return Err(RetrievalError::DegenerateLabelSet(prompts.len()));
    }
    if scores.len() != prompts.len() {
        return Err(RetrievalError::ShapeMismatch(scores.len(), prompts.len()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let tie = scores.iter().enumerate().any(|(i, &s)| i != best && s == scores[best]);
    Ok(Classification {
        label: prompts.labels[best].label.clone(),
        tie,
        scores: prompts
            .labels
            .iter()
            .zip(scores)
            .map(|(l, &score)| LabelScore {
                label: l.label.clone(),
                score,
            })
            .collect(),
    })
}

fn prompt_features(model: &ClampModel, prompts: &LabelPromptSet) -> Result<Mat, RetrievalError> {
    let tokens: Vec<TextTokens> = prompts.labels.iter().map(|l| model.tokenize(&l.prompt)).collect();
    let refs: Vec<&TextTokens> = tokens.iter().collect();
    Ok(model.text_features(&refs)?)
}

pub fn zero_shot_classify(
    model: &ClampModel,
    music: &PatchSequence,
    prompts: &LabelPromptSet,
) -> Result<Classification, RetrievalError> {
    Ok(zero_shot_batch(model, &[music], prompts)?.remove(0))
}

/// Classifies several pieces against one prompt set, encoding the prompts once.
pub fn zero_shot_batch(
    model: &ClampModel,
    music: &[&PatchSequence],
    prompts: &LabelPromptSet,
) -> Result<Vec<Classification>, RetrievalError> {
    if prompts.len() < 2 {
        return Err(RetrievalError::DegenerateLabelSet(prompts.len()));
    }
    let text = prompt_features(model, prompts)?;
    let mut out = Vec::with_capacity(music.len());
    for chunk in music.chunks(16) {
        let feats = model.music_features(chunk)?;
        let sims = feats.dot(&text.t());
        for row in sims.rows() {
            out.push(zero_shot_from_scores(prompts, row.as_slice().expect("contiguous row"))?);
        }
    }
    Ok(out)
}

/// Parses, strips and patch-encodes raw ABC for the music encoder.
pub fn encode_abc(model: &ClampModel, abc: &str) -> Result<PatchSequence, RetrievalError> {
    let score = parse_score("query", abc)?.strip_natural_language();
    Ok(encode_score(&segment_bars(&score)?, model.config.max_patches)?)
}

pub fn classify_abc(model: &ClampModel, abc: &str, prompts: &LabelPromptSet) -> Result<Classification, RetrievalError> {
    let seq = encode_abc(model, abc)?;
    zero_shot_classify(model, &seq, prompts)
}

pub(super) fn pair_sequences(pairs: &[PreparedPair]) -> Vec<&PatchSequence> {
    pairs.iter().map(|p| &p.patches).collect()
}

pub(super) fn gold_labels<'a>(pairs: &'a [MusicTextPair], field: &str) -> Vec<Option<&'a str>> {
    pairs.iter().map(|p| p.label(field)).collect()
}
