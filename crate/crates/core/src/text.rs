//! Text-side preparation: text dropout over candidate texts and the default
//! whitespace/character tokenizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_TEXT_LEN: usize = 128;
pub const TEXT_PAD: u32 = 0;
pub const TEXT_UNK: u32 = 1;
pub const TEXT_CLS: u32 = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];
/// Separator placed between the candidate texts chosen by text dropout.
pub const JOIN_DELIMITER: &str = " ";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("text dropout needs at least one candidate")]
    EmptyCandidates,
    #[error("bad vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDropoutConfig {
    pub enabled: bool,
    pub seed: u64,
}

impl Default for TextDropoutConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            seed: 0,
        }
    }
}

/// Draws K uniformly from 1..=L, shuffles the candidates (Fisher–Yates) and
/// joins the first K with a single space.
pub fn text_dropout<R: Rng + ?Sized>(candidates: &[String], rng: &mut R) -> Result<String, TextError> {
    if candidates.is_empty() {
        return Err(TextError::EmptyCandidates);
    }
    let k = rng.gen_range(1..=candidates.len());
    let mut order: Vec<&String> = candidates.iter().collect();
    order.shuffle(rng);
    Ok(order[..k]
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(JOIN_DELIMITER))
}

/// All candidates in stored order; the input used when dropout is disabled.
pub fn join_all(candidates: &[String]) -> String {
    candidates.join(JOIN_DELIMITER)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word-level vocabulary with single-character entries for fallback.
///
/// Ids 0..3 are `[PAD]`, `[UNK]`, `[CLS]`; the rest are sorted entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TextVocab {
    entries: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl From<Vec<String>> for TextVocab {
    fn from(entries: Vec<String>) -> Self {
        let lookup = entries
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { entries, lookup }
    }
}

impl From<TextVocab> for Vec<String> {
    fn from(vocab: TextVocab) -> Self {
        vocab.entries
    }
}

impl TextVocab {
    /// Builds a vocabulary from lowercased whitespace words that occur at
    /// least `min_count` times, plus every character seen.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            let lower = text.to_lowercase();
            for word in lower.split_whitespace() {
                *counts.entry(word.to_string()).or_default() += 1;
                chars.extend(word.chars().map(String::from));
            }
        }
        let words: BTreeSet<String> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count)
            .map(|(w, _)| w)
            .chain(chars)
            .collect();
        let entries = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect::<Vec<_>>();
        Self::from(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    /// One entry per line; the id is the zero-based line number.
    pub fn save_wordlist(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        let mut text = self.entries.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_wordlist(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let text = fs::read_to_string(path)?;
        let entries: Vec<String> = text.lines().map(str::to_string).collect();
        if entries.len() < SPECIALS.len() || entries[..3] != SPECIALS {
            return Err(TextError::Vocab("wordlist must start with [PAD] [UNK] [CLS]".into()));
        }
        if entries[3..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(TextError::Vocab("wordlist entries must be sorted and unique".into()));
        }
        Ok(Self::from(entries))
    }
}

/// `[CLS]` followed by word ids; out-of-vocabulary words expand to their
/// characters (unknown characters become `[UNK]`). Truncated to `max_len`.
pub fn tokenize_text(text: &str, vocab: &TextVocab, max_len: usize) -> TextTokens {
    let mut ids = vec![TEXT_CLS];
    'words: for word in text.to_lowercase().split_whitespace() {
        if ids.len() >= max_len {
            break;
        }
        match vocab.id(word) {
            Some(id) => ids.push(id),
            None => {
                let mut buf = [0u8; 4];
                for c in word.chars() {
                    if ids.len() >= max_len {
                        break 'words;
                    }
                    ids.push(vocab.id(c.encode_utf8(&mut buf)).unwrap_or(TEXT_UNK));
                }
            }
        }
    }
    ids.truncate(max_len);
    TextTokens {
        mask: vec![true; ids.len()],
        ids,
    }
}
