//! ABC score parsing and natural-language stripping.

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Header fields whose values carry natural language (title, composer,
/// origin, notes, lyrics, ...). Removed before a score enters the music
/// channel.
pub const STRIPPED_FIELDS: [char; 13] = [
    'T', 'C', 'O', 'A', 'Z', 'N', 'G', 'H', 'B', 'D', 'F', 'S', 'W',
];

/// One line of a score, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Line {
    Header { field: char, value: String },
    Body(String),
}

impl Line {
    pub fn text(&self) -> String {
        match self {
            Line::Header { field, value } => format!("{field}:{value}"),
            Line::Body(text) => text.clone(),
        }
    }

    pub fn is_header(&self) -> bool {
        matches!(self, Line::Header { .. })
    }
}

/// A parsed ABC piece.
///
/// Header lines may be interleaved with body lines (inline key changes, for
/// example), so lines are kept in a single ordered list and the header and
/// body views are derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub source_id: String,
    lines: Vec<Line>,
}

/// Returns `(field, value)` when `line` matches `^[A-Za-z]:`.
pub fn header_field(line: &str) -> Option<(char, &str)> {
    let mut chars = line.chars();
    let field = chars.next()?;
    if field.is_ascii_alphabetic() && chars.next() == Some(':') {
        Some((field, &line[2..]))
    } else {
        None
    }
}

impl Score {
    pub fn from_lines(source_id: impl Into<String>, lines: Vec<Line>) -> Self {
        Self {
            source_id: source_id.into(),
            lines,
        }
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn headers(&self) -> impl Iterator<Item = (char, &str)> {
        self.lines.iter().filter_map(|line| match line {
            Line::Header { field, value } => Some((*field, value.as_str())),
            Line::Body(_) => None,
        })
    }

    pub fn body_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|line| match line {
            Line::Body(text) => Some(text.as_str()),
            Line::Header { .. } => None,
        })
    }

    pub fn header(&self, field: char) -> Option<&str> {
        self.headers().find(|(f, _)| *f == field).map(|(_, v)| v)
    }

    /// Renders the score back to ABC text, one line per entry, LF-terminated.
    pub fn to_abc(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.text());
            out.push('\n');
        }
        out
    }

    /// Removes natural-language headers and lyric lines; everything else is
    /// kept byte-identical. Idempotent.
    pub fn strip_natural_language(&self) -> Score {
        let lines = self
            .lines
            .iter()
            .filter(|line| match line {
                Line::Header { field, .. } => {
                    !(STRIPPED_FIELDS.contains(field) || *field == 'w')
                }
                Line::Body(text) => !(text.starts_with("w:") || text.starts_with("W:")),
            })
            .cloned()
            .collect();
        Score {
            source_id: self.source_id.clone(),
            lines,
        }
    }
}

/// Parses raw ABC text. CRLF is normalized to LF and blank lines are dropped.
///
/// A missing `K:` header is reported with a warning but does not fail the
/// parse; use [`check_key_header`] to surface it as an error.
pub fn parse_score(source_id: impl Into<String>, text: &str) -> Result<Score, CorpusError> {
    let source_id = source_id.into();
    let normalized = text.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<Line> = normalized
        .split('\n')
        .filter(|line| !line.trim().is_empty())
        .map(|line| match header_field(line) {
            Some((field, value)) => Line::Header {
                field,
                value: value.to_string(),
            },
            None => Line::Body(line.to_string()),
        })
        .collect();
    if lines.is_empty() {
        return Err(CorpusError::EmptyScore);
    }
    let score = Score { source_id, lines };
    if let Err(err) = check_key_header(&score) {
        log::warn!("{}: {err}", score.source_id);
    }
    Ok(score)
}

pub fn check_key_header(score: &Score) -> Result<(), CorpusError> {
    if score.header('K').is_some() {
        Ok(())
    } else {
        Err(CorpusError::MissingKeyHeader(score.source_id.clone()))
    }
}
