//! Genre assignment by keyword voting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

const DEFAULT_TABLE: &str = include_str!("../../data/genre_keywords.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenreEntry {
    pub genre: String,
    pub keywords: Vec<String>,
}

/// Genre name to keyword list. Keywords are lowercase and unique across the
/// whole table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GenreEntry>", into = "Vec<GenreEntry>")]
pub struct GenreKeywordTable {
    entries: Vec<GenreEntry>,
}

impl TryFrom<Vec<GenreEntry>> for GenreKeywordTable {
    type Error = CorpusError;

    fn try_from(entries: Vec<GenreEntry>) -> Result<Self, Self::Error> {
        GenreKeywordTable::new(entries)
    }
}

impl From<GenreKeywordTable> for Vec<GenreEntry> {
    fn from(table: GenreKeywordTable) -> Self {
        table.entries
    }
}

impl GenreKeywordTable {
    pub fn new(entries: Vec<GenreEntry>) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::InvalidGenreTable("table is empty".into()));
        }
        let mut seen = HashSet::new();
        let entries = entries
            .into_iter()
            .map(|entry| {
                let keywords = entry
                    .keywords
                    .iter()
                    .map(|k| k.trim().to_lowercase())
                    .collect::<Vec<_>>();
                for keyword in &keywords {
                    if keyword.is_empty() || !seen.insert(keyword.clone()) {
                        return Err(CorpusError::InvalidGenreTable(format!(
                            "keyword {keyword:?} is empty or duplicated"
                        )));
                    }
                }
                Ok(GenreEntry {
                    genre: entry.genre,
                    keywords,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }

    /// The eight-genre WikiMT keyword table.
    pub fn wikimt() -> Self {
        serde_json::from_str(DEFAULT_TABLE).expect("bundled genre table is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::InvalidGenreTable(e.to_string()))
    }

    pub fn entries(&self) -> &[GenreEntry] {
        &self.entries
    }
}

/// Counts occurrences of `keyword` in `text` (both lowercase) that are
/// delimited by non-alphanumeric characters or the string ends.
fn count_whole_word(text: &str, keyword: &str) -> usize {
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    let mut count = 0;
    let mut start = 0;
    while let Some(pos) = text[start..].find(keyword) {
        let begin = start + pos;
        let end = begin + keyword.len();
        let before = text[..begin].chars().next_back();
        let after = text[end..].chars().next();
        if !is_word(before) && !is_word(after) {
            count += 1;
            start = end;
        } else {
            start = begin + text[begin..].chars().next().map_or(1, char::len_utf8);
        }
    }
    count
}

/// Returns the genre with strictly the most keyword matches, or `None` on no
/// matches or a tie.
pub fn assign_genre(text: &str, table: &GenreKeywordTable) -> Option<String> {
    let lower = text.to_lowercase();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for entry in &table.entries {
        let n: usize = entry
            .keywords
            .iter()
            .map(|k| count_whole_word(&lower, k))
            .sum();
        *counts.entry(entry.genre.as_str()).or_default() += n;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    if best == 0 {
        return None;
    }
    let mut winners = counts.iter().filter(|(_, &n)| n == best);
    let (genre, _) = winners.next()?;
    if winners.next().is_some() {
        None
    } else {
        Some(genre.to_string())
    }
}
