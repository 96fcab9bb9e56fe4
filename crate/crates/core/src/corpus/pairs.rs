//! JSONL music–text pair corpora.
//!
//! One record per line: `{"id": ..., "abc": ..., "texts": [...], "labels": {...}}`.
//! `id` and `labels` are optional; a missing id becomes `line-<n>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::score::{parse_score, Score};
use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MusicTextPair {
    /// Stripped score.
    pub music: Score,
    pub candidate_texts: Vec<String>,
    pub labels: BTreeMap<String, String>,
}

impl MusicTextPair {
    pub fn new(
        music: Score,
        candidate_texts: Vec<String>,
        labels: BTreeMap<String, String>,
    ) -> Result<Self, CorpusError> {
        if candidate_texts.is_empty() {
            return Err(CorpusError::InvalidPair("texts must not be empty".into()));
        }
        if candidate_texts.iter().any(|t| t.trim().is_empty()) {
            return Err(CorpusError::InvalidPair("blank candidate text".into()));
        }
        Ok(Self {
            music: music.strip_natural_language(),
            candidate_texts,
            labels,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.music.source_id
    }

    pub fn label(&self, name: &str) -> Option<&str> {
        self.labels.get(name).map(String::as_str)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    abc: String,
    texts: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, String>,
}

/// Parses JSONL pair records. Line numbers in errors are 1-based.
pub fn parse_pairs(content: &str) -> Result<Vec<MusicTextPair>, CorpusError> {
    let content = content.replace("\r\n", "\n");
    let mut pairs = Vec::new();
    for (idx, raw) in content.split('\n').enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Parse {
            line: line_no,
            message,
        };
        let record: PairRecord = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let id = record.id.unwrap_or_else(|| format!("line-{line_no}"));
        let score = parse_score(id, &record.abc).map_err(|e| err(e.to_string()))?;
        let pair = MusicTextPair::new(score, record.texts, record.labels)
            .map_err(|e| err(e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<MusicTextPair>, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&content)
}

pub fn pairs_to_jsonl(pairs: &[MusicTextPair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        let record = PairRecord {
            id: Some(pair.music.source_id.clone()),
            abc: pair.music.to_abc(),
            texts: pair.candidate_texts.clone(),
            labels: pair.labels.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("pair record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[MusicTextPair]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(pairs_to_jsonl(pairs).as_bytes())
        .map_err(io_err)
}
