//! Bar segmentation of ABC body lines.

use serde::{Deserialize, Serialize};

use super::score::{Line, Score};
use super::CorpusError;

pub const MAX_LINE_CHARS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Header,
    Bar,
}

/// Raw text of one header line or one bar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchText {
    pub text: String,
    pub kind: PatchKind,
}

impl PatchText {
    pub fn header(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: PatchKind::Header,
        }
    }

    pub fn bar(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: PatchKind::Bar,
        }
    }
}

// Two-character barlines first so matching is maximal munch.
const BARLINES: [&str; 6] = ["|:", ":|", "||", "[|", "|]", "|"];

fn barline_at(bytes: &[u8], at: usize) -> Option<usize> {
    BARLINES
        .iter()
        .find(|tok| bytes[at..].starts_with(tok.as_bytes()))
        .map(|tok| tok.len())
}

/// Splits one body line into bar texts.
///
/// A split happens immediately before a barline token whenever at least one
/// non-barline, non-whitespace character has been seen since the previous
/// split. A trailing segment made only of barlines and whitespace is merged
/// into the segment before it. Concatenating the output gives back `line`.
pub fn segment_line(line: &str) -> Result<Vec<String>, CorpusError> {
    let len = line.chars().count();
    if len > MAX_LINE_CHARS {
        return Err(CorpusError::OversizedLine { chars: len });
    }
    let bytes = line.as_bytes();
    let mut cuts = vec![0usize];
    let mut has_content = false;
    let mut i = 0;
    while i < bytes.len() {
        if let Some(tok_len) = barline_at(bytes, i) {
            if has_content {
                cuts.push(i);
                has_content = false;
            }
            i += tok_len;
        } else {
            // Multi-byte UTF-8 sequences never contain ASCII bytes, so
            // stepping bytewise keeps cut points on char boundaries.
            if !(bytes[i] as char).is_ascii_whitespace() {
                has_content = true;
            }
            i += 1;
        }
    }
    // `has_content` now describes the final segment.
    if !has_content && cuts.len() > 1 {
        cuts.pop();
    }
    cuts.push(bytes.len());
    Ok(cuts
        .windows(2)
        .map(|w| line[w[0]..w[1]].to_string())
        .collect())
}

/// Segments a (stripped) score into header and bar patches, in line order.
pub fn segment_bars(score: &Score) -> Result<Vec<PatchText>, CorpusError> {
    let mut patches = Vec::new();
    for line in score.lines() {
        match line {
            Line::Header { .. } => patches.push(PatchText::header(line.text())),
            Line::Body(text) => {
                patches.extend(segment_line(text)?.into_iter().map(PatchText::bar))
            }
        }
    }
    Ok(patches)
}
