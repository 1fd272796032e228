//! Byte-pair-encoding vocabulary, text normalization and sequence packing.

mod bpe;
mod pack;

pub use bpe::{train_bpe, BpeOptions};
pub use pack::{pack_corpus, pack_documents, split_documents, PackedSequence};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const DEFAULT_VOCAB_SIZE: usize = 8192;
pub const DEFAULT_CONTINUATION_MARKER: &str = "##";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {requested} too small: at least {minimum} required")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("id out of range: {id} >= {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("special token has no surface")]
    SpecialHasNoSurface,
    #[error("max_len must be at least 8, got {0}")]
    MaxLenTooSmall(usize),
    #[error("invalid vocab file: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

/// Whether `c` forms a pre-token on its own.
fn is_isolated(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Whitespace pre-tokenization with every non-alphanumeric character split
/// into its own pre-token.
pub fn pretokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = if lowercase { chunk.to_lowercase() } else { chunk.to_string() };
        let mut word = String::new();
        for c in chunk.chars() {
            if is_isolated(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// The canonical form `decode(encode(text))` reproduces.
pub fn normalize(text: &str, lowercase: bool) -> String {
    pretokenize(text, lowercase).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Specials {
    #[serde(rename = "PAD")]
    pad: TokenId,
    #[serde(rename = "UNK")]
    unk: TokenId,
    #[serde(rename = "CLS")]
    cls: TokenId,
    #[serde(rename = "SEP")]
    sep: TokenId,
    #[serde(rename = "MASK")]
    mask: TokenId,
}

const SPECIALS: Specials = Specials { pad: PAD, unk: UNK, cls: CLS, sep: SEP, mask: MASK };

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    merges: Vec<[String; 2]>,
    tokens: Vec<String>,
    specials: Specials,
    continuation_marker: String,
    lowercase: bool,
}

/// A trained BPE vocabulary.
///
/// Ids are dense; `0..5` are the special tokens, followed by the character
/// alphabet and then merged symbols in merge order.
#[derive(Clone, Debug)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merge_ranks: HashMap<(String, String), usize>,
    marker: String,
    lowercase: bool,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
            && self.tokens == other.tokens
            && self.marker == other.marker
            && self.lowercase == other.lowercase
    }
}

impl Vocab {
    pub(crate) fn from_parts(
        merges: Vec<(String, String)>,
        tokens: Vec<String>,
        marker: String,
        lowercase: bool,
    ) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_SURFACES {
            return Err(TokenizerError::InvalidVocab("special tokens must occupy ids 0..5".into()));
        }
        if marker.is_empty() {
            return Err(TokenizerError::InvalidVocab("empty continuation marker".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
            let stripped = t.strip_prefix(marker.as_str()).unwrap_or(t);
            if stripped.is_empty() {
                return Err(TokenizerError::InvalidVocab(format!("token {i} has an empty surface")));
            }
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let merge_ranks = merges.iter().enumerate().map(|(rank, pair)| (pair.clone(), rank)).collect();
        Ok(Self { merges, tokens, token_to_id, merge_ranks, marker, lowercase })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn continuation_marker(&self) -> &str {
        &self.marker
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Raw vocabulary entry, marker included.
    pub fn raw(&self, id: TokenId) -> Result<&str> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })
    }

    pub fn is_continuation(&self, id: TokenId) -> bool {
        !Self::is_special(id) && self.tokens.get(id as usize).is_some_and(|t| t.starts_with(self.marker.as_str()))
    }

    /// Surface of a non-special token with the continuation marker removed.
    pub fn token_surface(&self, id: TokenId) -> Result<&str> {
        if Self::is_special(id) {
            return Err(TokenizerError::SpecialHasNoSurface);
        }
        let raw = self.raw(id)?;
        Ok(raw.strip_prefix(self.marker.as_str()).unwrap_or(raw))
    }

    /// Word-initial tokens made only of alphabetic characters.
    pub fn word_ids(&self) -> Vec<TokenId> {
        (NUM_SPECIALS..self.len())
            .filter(|&i| {
                let t = &self.tokens[i];
                !t.starts_with(self.marker.as_str()) && t.chars().all(char::is_alphabetic)
            })
            .map(|i| i as TokenId)
            .collect()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<String> = word
            .chars()
            .enumerate()
            .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{}{c}", self.marker) })
            .collect();
        while symbols.len() > 1 {
            let best =
                symbols.windows(2).filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())).copied()).min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let merged = bpe::merged_surface(left, right, &self.marker);
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    next.push(merged.clone());
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// Greedy application of merges in learned order; unknown characters
    /// become [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in pretokenize(text, self.lowercase) {
            self.encode_word(&word, &mut out);
        }
        out
    }

    /// Joins surfaces with spaces, attaching continuation pieces to their
    /// predecessor. Specials render as `[PAD]`, `[CLS]`, ...
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let raw = self.raw(id)?;
            if self.is_continuation(id) {
                out.push_str(&raw[self.marker.len()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(raw);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            tokens: self.tokens.clone(),
            specials: SPECIALS,
            continuation_marker: self.marker.clone(),
            lowercase: self.lowercase,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.specials != SPECIALS {
            return Err(TokenizerError::InvalidVocab("non-standard special ids".into()));
        }
        let merges = file.merges.into_iter().map(|[l, r]| (l, r)).collect();
        Self::from_parts(merges, file.tokens, file.continuation_marker, file.lowercase)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn content_hash(&self) -> String {
        let json = self.to_json().expect("vocab serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
