//! Character-level vocabulary and tokenizer.
//!
//! A character is a Unicode scalar value after NFC normalization; combining
//! marks become distinct tokens. Unknown characters map to `UNK` so
//! evaluation on unseen text is possible.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt::Write as _;

use unicode_normalization::UnicodeNormalization;

use crate::error::{HtrError, Result};

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const NUM_SPECIALS: usize = 4;

/// Character inventory with the four special ids at 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_char: Vec<char>,
    char_to_id: HashMap<char, usize>,
}

/// Token id sequence; sos-prefixed and eos-terminated during training and
/// decoding, pad-tailed in batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

/// NFC composition, whitespace runs collapsed to a single space, exterior
/// whitespace trimmed. Characters stay in logical order.
pub fn normalize_text(s: &str) -> String {
    let composed: String = s.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    let mut pending_space = false;
    for c in composed.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

impl Vocab {
    /// Deterministic vocabulary: unique characters of the normalized corpus
    /// sorted by codepoint, after the four specials.
    pub fn build(corpus: &[impl AsRef<str>]) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(HtrError::Contract("build_vocab: empty corpus".into()));
        }
        let chars: BTreeSet<char> =
            corpus.iter().flat_map(|s| normalize_text(s.as_ref()).chars().collect::<Vec<_>>()).collect();
        Ok(Vocab::from_chars(chars.into_iter().collect()))
    }

    pub fn from_chars(id_to_char: Vec<char>) -> Vocab {
        let char_to_id =
            id_to_char.iter().enumerate().map(|(i, &c)| (c, i + NUM_SPECIALS)).collect();
        Vocab { id_to_char, char_to_id }
    }

    /// Total id count including the specials.
    pub fn size(&self) -> usize {
        self.id_to_char.len() + NUM_SPECIALS
    }

    pub fn chars(&self) -> &[char] {
        &self.id_to_char
    }

    pub fn id_of(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// `[sos] + per-character ids (unk for unseen) + [eos]`.
    pub fn encode(&self, s: &str) -> TokenSeq {
        let norm = normalize_text(s);
        let mut ids = Vec::with_capacity(norm.chars().count() + 2);
        ids.push(SOS_ID);
        ids.extend(norm.chars().map(|c| self.id_of(c)));
        ids.push(EOS_ID);
        TokenSeq { ids }
    }

    /// Characters between sos and the first eos; pad/sos dropped, unk
    /// rendered as U+FFFD.
    pub fn decode(&self, t: &TokenSeq) -> String {
        let mut out = String::new();
        for &id in &t.ids {
            match id {
                EOS_ID => break,
                PAD_ID | SOS_ID => {}
                UNK_ID => out.push('\u{FFFD}'),
                _ => match self.id_to_char.get(id - NUM_SPECIALS) {
                    Some(&c) => out.push(c),
                    None => out.push('\u{FFFD}'),
                },
            }
        }
        out
    }

    /// One character per line; line number = id - 4, specials implicit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &c in &self.id_to_char {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(HtrError::Contract(format!(
                        "vocab line {} must hold exactly one character",
                        i + 1
                    )))
                }
            }
        }
        Ok(Vocab::from_chars(chars))
    }
}
