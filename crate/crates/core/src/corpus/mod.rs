//! ABC corpus handling: parsing, natural-language stripping, bar
//! segmentation, pair ingestion, genre labelling and statistics.

mod genre;
mod pairs;
mod score;
mod segment;
mod stats;

use thiserror::Error;

pub use genre::{assign_genre, GenreEntry, GenreKeywordTable};
pub use pairs::{load_pairs, pairs_to_jsonl, parse_pairs, save_pairs, MusicTextPair};
pub use score::{check_key_header, header_field, parse_score, Line, Score, STRIPPED_FIELDS};
pub use segment::{segment_bars, segment_line, PatchKind, PatchText, MAX_LINE_CHARS};
pub use stats::{corpus_stats, CorpusStats, TokenStats};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty score")]
    EmptyScore,
    #[error("score {0} has no K: header")]
    MissingKeyHeader(String),
    #[error("body line of {chars} characters exceeds the {MAX_LINE_CHARS} limit")]
    OversizedLine { chars: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid pair: {0}")]
    InvalidPair(String),
    #[error("invalid genre table: {0}")]
    InvalidGenreTable(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}
