//! Bar-patch tokenization: every patch becomes a fixed row of 64 token ids
//! over a 98-symbol vocabulary.
//!
//! Ids 0, 1 and 2 are `[PAD]`, `[MASK]` and `[END]`; ids 3..=97 are the
//! printable ASCII characters 0x20..=0x7E in code-point order.

use std::io::{Read, Write};

use thiserror::Error;

use crate::corpus::{header_field, PatchKind, PatchText};

pub const PATCH_LEN: usize = 64;
pub const VOCAB_SIZE: usize = 98;
pub const PAD: u8 = 0;
pub const MASK: u8 = 1;
pub const END: u8 = 2;
/// Content characters per patch; one slot is always left for `[END]`.
pub const MAX_PATCH_CHARS: usize = PATCH_LEN - 1;
/// Character used when decoding a `[MASK]` slot.
pub const MASK_CHAR: char = '?';

const BPAT_MAGIC: &[u8; 4] = b"BPAT";
const BPAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("token id {0} is outside the 98-symbol vocabulary")]
    InvalidToken(u8),
    #[error("cannot encode a score with no patches")]
    EmptySequence,
    #[error("bad patch file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn char_to_id(c: char) -> Option<u8> {
    match c {
        ' '..='~' => Some(c as u8 - 32 + 3),
        _ => None,
    }
}

pub fn id_to_char(id: u8) -> Option<char> {
    match id {
        3..=97 => Some((id - 3 + 32) as char),
        _ => None,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchTokens(pub [u8; PATCH_LEN]);

impl std::fmt::Debug for PatchTokens {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PatchTokens({:?})", decode_patch(self).unwrap_or_default())
    }
}

impl PatchTokens {
    pub fn masked() -> Self {
        PatchTokens([MASK; PATCH_LEN])
    }

    pub fn ids(&self) -> &[u8; PATCH_LEN] {
        &self.0
    }

    /// Number of slots before the first `[END]` (or 64 if there is none).
    pub fn content_len(&self) -> usize {
        self.0.iter().position(|&t| t == END).unwrap_or(PATCH_LEN)
    }

    /// Flat one-hot row-major 64x98 expansion.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut m = vec![0.0; PATCH_LEN * VOCAB_SIZE];
        for (pos, &tok) in self.0.iter().enumerate() {
            m[pos * VOCAB_SIZE + tok as usize] = 1.0;
        }
        m
    }
}

/// Encodes one patch. Non-ASCII characters are dropped with a warning and the
/// content is cut at 63 characters.
pub fn encode_patch(patch: &str) -> PatchTokens {
    let mut row = [PAD; PATCH_LEN];
    let mut len = 0;
    let mut dropped = 0;
    for c in patch.chars() {
        match char_to_id(c) {
            Some(id) if len < MAX_PATCH_CHARS => {
                row[len] = id;
                len += 1;
            }
            Some(_) => {}
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} non-printable-ASCII characters from patch {patch:?}");
    }
    row[len] = END;
    PatchTokens(row)
}

/// Decodes up to the first `[END]`. `[MASK]` decodes to `?`, `[PAD]` to nothing.
pub fn decode_patch(tokens: &PatchTokens) -> Result<String, PatchError> {
    let mut out = String::new();
    for &id in tokens.0.iter() {
        match id {
            END => break,
            PAD => {}
            MASK => out.push(MASK_CHAR),
            _ => out.push(id_to_char(id).ok_or(PatchError::InvalidToken(id))?),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSequence {
    pub patches: Vec<PatchTokens>,
    pub kinds: Vec<PatchKind>,
    /// True for real patches.
    pub mask: Vec<bool>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn bar_positions(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == PatchKind::Bar)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes the `BPAT` layout: magic, version byte, little-endian u32 patch
    /// count, then one 64-byte row per patch.
    pub fn write_to(&self, mut out: impl Write) -> Result<(), PatchError> {
        out.write_all(BPAT_MAGIC)?;
        out.write_all(&[BPAT_VERSION])?;
        out.write_all(&(self.patches.len() as u32).to_le_bytes())?;
        for patch in &self.patches {
            out.write_all(&patch.0)?;
        }
        Ok(())
    }

    /// Reads a `BPAT` stream. Patch kinds are recovered from the decoded text
    /// (a header patch is a full `X:` style line) and every patch is real.
    pub fn read_from(mut input: impl Read) -> Result<Self, PatchError> {
        let mut head = [0u8; 9];
        input.read_exact(&mut head)?;
        if &head[..4] != BPAT_MAGIC {
            return Err(PatchError::Format("missing BPAT magic".into()));
        }
        if head[4] != BPAT_VERSION {
            return Err(PatchError::Format(format!("unsupported version {}", head[4])));
        }
        let count = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
        let mut patches = Vec::with_capacity(count);
        let mut kinds = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = [0u8; PATCH_LEN];
            input.read_exact(&mut row)?;
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
                return Err(PatchError::InvalidToken(bad));
            }
            let tokens = PatchTokens(row);
            let text = decode_patch(&tokens)?;
            kinds.push(if header_field(&text).is_some() {
                PatchKind::Header
            } else {
                PatchKind::Bar
            });
            patches.push(tokens);
        }
        Ok(Self {
            mask: vec![true; patches.len()],
            patches,
            kinds,
        })
    }
}

/// Encodes segmented patches in order, keeping at most `max_patches` from the
/// front.
pub fn encode_score(patches: &[PatchText], max_patches: usize) -> Result<PatchSequence, PatchError> {
    if patches.is_empty() {
        return Err(PatchError::EmptySequence);
    }
    let kept = &patches[..patches.len().min(max_patches)];
    Ok(PatchSequence {
        patches: kept.iter().map(|p| encode_patch(&p.text)).collect(),
        kinds: kept.iter().map(|p| p.kind).collect(),
        mask: vec![true; kept.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(prefix: &[u8]) -> [u8; PATCH_LEN] {
        let mut r = [PAD; PATCH_LEN];
        r[..prefix.len()].copy_from_slice(prefix);
        r
    }

    #[test]
    fn vocabulary_bijection() {
        for code in 0x20u8..=0x7e {
            let id = char_to_id(code as char).unwrap();
            assert_eq!(id as usize, code as usize - 32 + 3);
            assert_eq!(id_to_char(id), Some(code as char));
        }
        for id in 0..3 {
            assert_eq!(id_to_char(id), None);
        }
        assert_eq!(char_to_id('\t'), None);
        assert_eq!(char_to_id('é'), None);
    }

    #[test]
    fn encodes_header() {
        // 'X' = 88 -> 59, ':' = 58 -> 29, '1' = 49 -> 20
        assert_eq!(encode_patch("X:1").0, row(&[59, 29, 20, END]));
    }

    #[test]
    fn empty_patch_is_end_only() {
        assert_eq!(encode_patch("").0, row(&[END]));
    }

    #[test]
    fn long_patch_truncated() {
        let text: String = (0..100).map(|i| (b'A' + (i % 26) as u8) as char).collect();
        let tokens = encode_patch(&text);
        let expected: Vec<u8> = text.bytes().take(63).map(|b| b - 32 + 3).collect();
        assert_eq!(&tokens.0[..63], expected.as_slice());
        assert_eq!(tokens.0[63], END);
        assert_eq!(decode_patch(&tokens).unwrap(), &text[..63]);
    }

    #[test]
    fn non_ascii_dropped() {
        assert_eq!(encode_patch("A\u{00e9}B"), encode_patch("AB"));
    }

    #[test]
    fn decodes() {
        assert_eq!(decode_patch(&encode_patch("|: F |")).unwrap(), "|: F |");
        assert_eq!(decode_patch(&PatchTokens(row(&[END]))).unwrap(), "");
        let masked = PatchTokens(row(&[MASK, MASK, 40, END]));
        assert_eq!(decode_patch(&masked).unwrap(), "??E");
        assert!(matches!(
            decode_patch(&PatchTokens(row(&[98]))),
            Err(PatchError::InvalidToken(98))
        ));
    }

    #[test]
    fn encode_score_truncates_tail() {
        let patches: Vec<_> = (0..600).map(|i| PatchText::bar(format!("C{i}|"))).collect();
        let seq = encode_score(&patches, 512).unwrap();
        assert_eq!(seq.len(), 512);
        assert_eq!(decode_patch(&seq.patches[511]).unwrap(), "C511|");
        let small = encode_score(&patches[..6], 512).unwrap();
        assert_eq!(small.len(), 6);
        assert!(small.mask.iter().all(|&m| m));
        assert!(matches!(encode_score(&[], 512), Err(PatchError::EmptySequence)));
    }

    #[test]
    fn bpat_round_trip() {
        let patches = vec![
            PatchText::header("X:1"),
            PatchText::header("K:G"),
            PatchText::bar("GABc "),
            PatchText::bar("|d2d2|]"),
        ];
        let seq = encode_score(&patches, 512).unwrap();
        let mut bytes = Vec::new();
        seq.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 9 + 4 * 64);
        assert_eq!(&bytes[..5], b"BPAT\x01");
        let back = PatchSequence::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, seq);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    proptest! {
        #[test]
        fn round_trip(text in "[ -~]{0,63}") {
            prop_assert_eq!(decode_patch(&encode_patch(&text)).unwrap(), text);
        }

        #[test]
        fn one_end_and_one_hot(text in "[ -~]{0,100}") {
            let tokens = encode_patch(&text);
            prop_assert_eq!(tokens.0.iter().filter(|&&t| t == END).count(), 1);
            let end = tokens.content_len();
            prop_assert!(tokens.0[end + 1..].iter().all(|&t| t == PAD));
            let hot = tokens.one_hot();
            prop_assert_eq!(hot.len(), 64 * 98);
            for r in hot.chunks(VOCAB_SIZE) {
                prop_assert_eq!(r.iter().sum::<f64>(), 1.0);
            }
        }
    }
}
