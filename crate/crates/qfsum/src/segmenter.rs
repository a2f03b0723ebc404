//! Tokenization, vocabulary management, and overlapping segmentation.
//!
//! Long documents are split into fixed-length segments with a configurable
//! overlap; each segment is later paired with the query and encoded
//! independently. The default tokenizer is word-level (lowercase, split on
//! whitespace and punctuation) with a vocabulary built from the training
//! split; anything honoring the same encode/decode contract can be plugged
//! in instead.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings for turning a document into query-prefixed encoder inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Tokens per segment window.
    pub segment_length: usize,
    /// Fraction of each window shared with its successor, in [0, 1).
    pub overlap_fraction: f64,
    /// Query tokens kept when building each segment's encoder input.
    pub max_query_length: usize,
}

impl Default for SegmenterConfig {
    fn default() -> SegmenterConfig {
        SegmenterConfig {
            segment_length: 512,
            overlap_fraction: 0.5,
            max_query_length: 128,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 2 {
            return Err(Error::Config(format!(
                "segment_length must be at least 2, got {}",
                self.segment_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.max_query_length == 0 {
            return Err(Error::Config(
                "max_query_length must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Longest encoder input this configuration can produce: a full segment,
    /// a maximally long query, and the three structural markers.
    pub fn max_input_length(&self) -> usize {
        self.segment_length + self.max_query_length + 3
    }
}

/// Reserved token ids. These are stable across runs and precede every
/// vocabulary entry: the on-disk vocabulary file stores only non-reserved
/// tokens, with line `i` holding the token for id `RESERVED_TOKENS.len() + i`.
pub const PAD_ID: u32 = 0;
pub const BEGIN_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

/// Printable markers for the reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];

/// Token-string to integer-id mapping with a fixed reserved block.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// A vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Vocabulary {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    /// Build a vocabulary from a token stream. Tokens seen fewer than
    /// `min_frequency` times are dropped (they will encode as `<unk>`).
    /// Ordering is deterministic: descending frequency, ties broken
    /// lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>, min_frequency: usize) -> Vocabulary {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_frequency.max(1) && !RESERVED_TOKENS.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Vocabulary::reserved_only();
        for (token, _) in entries {
            let id = vocab.id_to_token.len() as u32;
            vocab.id_to_token.push(token.to_string());
            vocab.token_to_id.insert(token.to_string(), id);
        }
        vocab
    }

    /// Rebuild a vocabulary from its non-reserved tokens in id order (the
    /// shape produced by [`Vocabulary::non_reserved_tokens`]). Duplicates
    /// and reserved markers are rejected.
    pub fn from_ordered_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Vocabulary> {
        let mut vocab = Vocabulary::reserved_only();
        for token in tokens {
            if token.is_empty() || RESERVED_TOKENS.contains(&token.as_str()) {
                return Err(Error::Data(format!(
                    "invalid vocabulary entry `{token}`: empty or reserved"
                )));
            }
            let id = vocab.id_to_token.len() as u32;
            if vocab.token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::Data(format!(
                    "duplicate vocabulary entry `{token}`"
                )));
            }
            vocab.id_to_token.push(token);
        }
        Ok(vocab)
    }

    /// The non-reserved tokens in id order; feeding these back through
    /// [`Vocabulary::from_ordered_tokens`] reproduces this vocabulary.
    pub fn non_reserved_tokens(&self) -> Vec<String> {
        self.id_to_token[RESERVED_TOKENS.len()..].to_vec()
    }

    /// Total number of ids, reserved block included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Map token strings to ids; unknown tokens become `UNK_ID`.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Map ids back to token strings. Reserved ids yield their markers;
    /// out-of-range ids yield the unknown marker.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                self.token_of(id)
                    .unwrap_or(RESERVED_TOKENS[UNK_ID as usize])
                    .to_string()
            })
            .collect()
    }

    /// Write the non-reserved tokens, one per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for token in &self.id_to_token[RESERVED_TOKENS.len()..] {
            writeln!(file, "{token}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Inverse of [`Vocabulary::save`].
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocabulary::reserved_only();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let token = line.map_err(|e| Error::io(path, e))?;
            if token.is_empty() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "empty vocabulary entry".into(),
                });
            }
            let id = vocab.id_to_token.len() as u32;
            vocab.id_to_token.push(token.clone());
            vocab.token_to_id.insert(token, id);
        }
        Ok(vocab)
    }
}

/// Word-level tokenizer plus vocabulary. Lowercasing is the default casing
/// policy; setting `lowercase: false` preserves input casing everywhere.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub vocabulary: Vocabulary,
}

impl Tokenizer {
    /// Tokenizer with an empty (reserved-only) vocabulary, enough for the
    /// string-level `tokenize` used during ingestion.
    pub fn new(lowercase: bool) -> Tokenizer {
        Tokenizer {
            lowercase,
            vocabulary: Vocabulary::reserved_only(),
        }
    }

    pub fn with_vocabulary(vocabulary: Vocabulary, lowercase: bool) -> Tokenizer {
        Tokenizer {
            lowercase,
            vocabulary,
        }
    }

    /// Split text into word and punctuation tokens. Alphanumeric runs form
    /// words; every other non-whitespace character is its own token.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_whitespace() {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
            } else if ch.is_alphanumeric() {
                if self.lowercase {
                    word.extend(ch.to_lowercase());
                } else {
                    word.push(ch);
                }
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        self.vocabulary.encode(tokens)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        self.vocabulary.decode(ids)
    }
}

/// A fixed-length window of the source document.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Ordinal within the document.
    pub index: usize,
    /// Token ids covered by this segment.
    pub token_ids: Vec<u32>,
    /// Half-open token interval into the source document.
    pub doc_start: usize,
    pub doc_end: usize,
    /// Relevance flag, set by the labeler; false until labeled.
    pub is_gold: bool,
}

/// Split a document into overlapping fixed-length segments.
///
/// Windows start at multiples of `stride = floor(segment_length * (1 -
/// overlap_fraction))` (minimum 1); the final window is truncated at the
/// document end, never padded. Every token is covered by at least one
/// segment, and consecutive segments overlap by `segment_length - stride`
/// tokens (equal to `floor(segment_length * overlap_fraction)` whenever that
/// product is integral) except possibly the last pair.
pub fn segment_document(
    doc: &[u32],
    segment_length: usize,
    overlap_fraction: f64,
) -> Result<Vec<Segment>> {
    if segment_length < 2 {
        return Err(Error::Config(format!(
            "segment_length must be at least 2, got {segment_length}"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap_fraction must lie in [0, 1), got {overlap_fraction}"
        )));
    }
    if doc.is_empty() {
        return Err(Error::Data("cannot segment an empty document".into()));
    }
    let stride = ((segment_length as f64) * (1.0 - overlap_fraction)).floor() as usize;
    let stride = stride.max(1);
    let mut segments = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + segment_length).min(doc.len());
        segments.push(Segment {
            index: segments.len(),
            token_ids: doc[start..end].to_vec(),
            doc_start: start,
            doc_end: end,
            is_gold: false,
        });
        if end == doc.len() {
            break;
        }
        start += stride;
    }
    Ok(segments)
}

/// Assemble the encoder input for one segment:
/// `begin ++ truncate(query, max_query_length) ++ separator ++ segment ++ end`.
///
/// Position 0 is the begin token; its encoder state serves as the segment's
/// classification representation. The result never exceeds
/// `max_query_length + segment.token_ids.len() + 3` tokens.
pub fn build_model_input(query: &[u32], segment: &Segment, max_query_length: usize) -> Vec<u32> {
    let q = &query[..query.len().min(max_query_length)];
    let mut input = Vec::with_capacity(q.len() + segment.token_ids.len() + 3);
    input.push(BEGIN_ID);
    input.extend_from_slice(q);
    input.push(SEP_ID);
    input.extend_from_slice(&segment.token_ids);
    input.push(END_ID);
    input
}
