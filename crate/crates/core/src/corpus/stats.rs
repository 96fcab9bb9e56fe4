//! Token-count statistics over a pair corpus.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::pairs::MusicTextPair;
use super::segment::segment_bars;
use super::CorpusError;

/// Mean, population standard deviation, max and min of one per-piece count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    pub std: f64,
    pub max: usize,
    pub min: usize,
}

impl TokenStats {
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            max: *counts.iter().max()?,
            min: *counts.iter().min()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pieces: usize,
    /// Characters of the stripped ABC text, line breaks included.
    pub abc_chars: TokenStats,
    pub bar_patches: TokenStats,
    /// Whitespace tokens of all candidate texts joined together.
    pub text_whitespace: TokenStats,
}

impl CorpusStats {
    /// Bar-patch mean divided by raw character mean.
    pub fn length_reduction(&self) -> f64 {
        self.bar_patches.mean / self.abc_chars.mean
    }
}

pub fn corpus_stats(pairs: &[MusicTextPair]) -> Result<CorpusStats, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut chars = Vec::with_capacity(pairs.len());
    let mut patches = Vec::with_capacity(pairs.len());
    let mut words = Vec::with_capacity(pairs.len());
    for pair in pairs {
        chars.push(pair.music.to_abc().chars().count());
        patches.push(segment_bars(&pair.music)?.len());
        words.push(
            pair.candidate_texts
                .iter()
                .map(|t| t.split_whitespace().count())
                .sum(),
        );
    }
    let stats = |c: &[usize]| TokenStats::from_counts(c).ok_or(CorpusError::EmptyCorpus);
    Ok(CorpusStats {
        pieces: pairs.len(),
        abc_chars: stats(&chars)?,
        bar_patches: stats(&patches)?,
        text_whitespace: stats(&words)?,
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pieces: {}", self.pieces)?;
        writeln!(
            f,
            "{:<22} {:>18} {:>8} {:>8}",
            "encoding", "avg", "max", "min"
        )?;
        for (name, s) in [
            ("ABC characters", &self.abc_chars),
            ("bar patches", &self.bar_patches),
            ("whitespace (text)", &self.text_whitespace),
        ] {
            let avg = format!("{:.2}±{:.2}", s.mean, s.std);
            writeln!(f, "{name:<22} {avg:>18} {:>8} {:>8}", s.max, s.min)?;
        }
        write!(f, "patch/char ratio: {:.4}", self.length_reduction())
    }
}
