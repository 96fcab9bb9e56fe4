//! Flat vector store with a JSONL metadata sidecar.
//!
//! Vector file layout (little-endian):
//!
//! ```text
//! "CIDX" | version: u8 | dim: u32 | count: u64 | count*dim f32
//! ```
//!
//! The sidecar `<file>.meta.jsonl` holds one [`IndexRecord`] per vector.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::contrastive::prepare_pair;
use crate::corpus::MusicTextPair;
use crate::nn::ClampModel;
use crate::patch::PatchSequence;

const MAGIC: &[u8; 4] = b"CIDX";
const VERSION: u8 = 1;
const UNIT_TOLERANCE: f64 = 1e-5;
const ENCODE_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    pub abc: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: Vec<f32>,
    records: Vec<IndexRecord>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub source_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub hits: Vec<SearchHit>,
}

/// `<path>.meta.jsonl`
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.jsonl");
    path.with_file_name(name)
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, source_id: &str) -> Option<usize> {
        self.by_id.get(source_id).copied()
    }

    pub fn get(&self, source_id: &str) -> Option<&IndexRecord> {
        self.position(source_id).map(|i| &self.records[i])
    }

    /// Appends a unit-norm vector. Later records with a duplicate id shadow
    /// earlier ones in [`EmbeddingIndex::get`].
    pub fn push(&mut self, vector: &[f64], record: IndexRecord) -> Result<(), RetrievalError> {
        if vector.len() != self.dim {
            return Err(RetrievalError::ConfigMismatch {
                index: self.dim,
                model: vector.len(),
            });
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(RetrievalError::Format(format!(
                "vector for {} has norm {norm}",
                record.source_id
            )));
        }
        self.vectors.extend(vector.iter().map(|&x| x as f32));
        self.by_id.insert(record.source_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn check_model(&self, model: &ClampModel) -> Result<(), RetrievalError> {
        if self.dim != model.dim() {
            return Err(RetrievalError::ConfigMismatch {
                index: self.dim,
                model: model.dim(),
            });
        }
        Ok(())
    }

    /// Dot product of every stored vector with `query`.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.vector(i)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| a as f64 * b)
                    .sum()
            })
            .collect()
    }

    /// All positions by decreasing score, ties by ascending source id.
    pub fn rank(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        scored.sort_by(|a, b| self.compare(*a, *b));
        scored
    }

    fn compare(&self, a: (usize, f64), b: (usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then_with(|| self.records[a.0].source_id.cmp(&self.records[b.0].source_id))
    }

    /// 1-based rank of position `target` under `query`, consistent with
    /// [`EmbeddingIndex::rank`].
    pub fn rank_of(&self, query: &[f64], target: usize) -> usize {
        let scores = self.scores(query);
        let t = (target, scores[target]);
        1 + scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| i != target && self.compare((i, s), t) == Ordering::Less)
            .count()
    }

    pub fn write_vectors(&self, mut out: impl Write) -> Result<(), RetrievalError> {
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.vectors.len() * 4);
        for x in &self.vectors {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn write_meta(&self, mut out: impl Write) -> Result<(), RetrievalError> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the vector file and its sidecar.
    pub fn read(mut vectors: impl Read, meta: &str) -> Result<Self, RetrievalError> {
        let mut head = [0u8; 17];
        vectors.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(RetrievalError::Format("missing CIDX magic".into()));
        }
        if head[4] != VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {}", head[4])));
        }
        let dim = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(head[9..17].try_into().expect("8 bytes")) as usize;
        let mut raw = vec![0u8; count * dim * 4];
        vectors.read_exact(&mut raw)?;
        let mut trailing = [0u8; 1];
        if vectors.read(&mut trailing)? != 0 {
            return Err(RetrievalError::Format("trailing bytes after vectors".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let records = meta
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<IndexRecord>, _>>()?;
        if records.len() != count {
            return Err(RetrievalError::Format(format!(
                "{count} vectors but {} metadata records",
                records.len()
            )));
        }
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.source_id.clone(), i))
            .collect();
        Ok(Self {
            dim,
            vectors: data,
            records,
            by_id,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let mut vectors = Vec::new();
        self.write_vectors(&mut vectors)?;
        fs::write(path, vectors)?;
        let mut meta = Vec::new();
        self.write_meta(&mut meta)?;
        fs::write(meta_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let vectors = fs::read(path)?;
        let meta = fs::read_to_string(meta_path(path))?;
        Self::read(vectors.as_slice(), &meta)
    }
}

/// Music features for every pair, in corpus order.
pub fn build_index(model: &ClampModel, pairs: &[MusicTextPair]) -> Result<EmbeddingIndex, RetrievalError> {
    let mut index = EmbeddingIndex::new(model.dim());
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let prepared = chunk
            .iter()
            .map(|p| prepare_pair(p, model.config.max_patches))
            .collect::<Result<Vec<_>, _>>()?;
        let seqs: Vec<&PatchSequence> = prepared.iter().map(|p| &p.patches).collect();
        let features = model.music_features(&seqs)?;
        for (pair, row) in chunk.iter().zip(features.rows()) {
            let record = IndexRecord {
                source_id: pair.source_id().to_string(),
                title: pair.label("title").map(str::to_string),
                labels: pair.labels.clone(),
                abc: pair.music.to_abc(),
            };
            index.push(row.as_slice().expect("contiguous row"), record)?;
        }
    }
    Ok(index)
}

/// Top-`k` pieces for a free-text query.
pub fn search(
    index: &EmbeddingIndex,
    model: &ClampModel,
    query: &str,
    k: usize,
) -> Result<RankedResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    index.check_model(model)?;
    let tokens = model.tokenize(query);
    let feature = model.text_features(&[&tokens])?;
    let hits = index
        .rank(feature.row(0).as_slice().expect("contiguous row"))
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (i, score))| SearchHit {
            rank: r + 1,
            source_id: index.records[i].source_id.clone(),
            score,
        })
        .collect();
    Ok(RankedResult { hits })
}
