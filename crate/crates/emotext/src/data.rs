//! Dataset model: labels, examples, preprocessing, the whitespace
//! tokenizer/vocabulary, deterministic splits and label statistics.
//!
//! Two file formats are understood. The line format is tab-separated
//! `id<TAB>text<TAB>labels` with labels as comma-separated names (an empty
//! field is the empty label set). The JSON-lines format is one
//! `{"id": ..., "text": ..., "labels": [...]}` object per line and is the
//! canonical form for generated data.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The fixed, ordered label universe. Every report and bitmask uses this
/// order.
pub const LABEL_NAMES: [&str; 5] = ["Anger", "Fear", "Joy", "Sadness", "Surprise"];

/// Number of sentiment classes.
pub const NUM_LABELS: usize = 5;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// First id available to content tokens.
pub const FIRST_CONTENT_ID: usize = 5;

const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown label name {0:?}")]
    UnknownLabel(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("max_len {0} leaves no room for CLS + token + SEP")]
    MaxLenTooSmall(usize),
    #[error("line {line}: expected {expected} tab-separated fields, found {found}")]
    BadRecord {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {source}")]
    BadJson {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Subset of the five sentiment labels, stored as a bitmask in the fixed
/// label order. The empty set is legal.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelSet(u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_bits(bits: u8) -> Self {
        LabelSet(bits & 0b11111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_names<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let mut bits = 0u8;
        for name in names {
            let name = name.as_ref();
            let idx = LABEL_NAMES
                .iter()
                .position(|&l| l == name)
                .ok_or_else(|| DataError::UnknownLabel(name.to_string()))?;
            bits |= 1 << idx;
        }
        Ok(LabelSet(bits))
    }

    pub fn with(self, index: usize) -> Self {
        LabelSet(self.0 | (1 << index))
    }

    pub fn contains(self, index: usize) -> bool {
        self.0 & (1 << index) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn names(self) -> Vec<&'static str> {
        (0..NUM_LABELS)
            .filter(|&i| self.contains(i))
            .map(|i| LABEL_NAMES[i])
            .collect()
    }

    /// 0/1 indicator vector in label order.
    pub fn indicator(self) -> [f64; NUM_LABELS] {
        std::array::from_fn(|i| if self.contains(i) { 1.0 } else { 0.0 })
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(","))
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.names().join(","))
    }
}

/// One short text with its label subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub labels: LabelSet,
}

/// Where a dataset's examples came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Generated,
    Mixed,
}

/// Ordered collection of examples with unique ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, provenance: Provenance) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(DataError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            examples,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Preprocesses every text in place, dropping examples that come out
    /// empty. Returns the number of dropped examples.
    pub fn preprocess_in_place(&mut self) -> usize {
        let before = self.examples.len();
        self.examples.retain_mut(|ex| {
            ex.text = preprocess(&ex.text);
            if ex.text.is_empty() {
                log::warn!("dropping example {:?}: empty after preprocessing", ex.id);
                false
            } else {
                true
            }
        });
        before - self.examples.len()
    }

    /// Deterministic split into (1−fraction, fraction) parts. The held-out
    /// part receives at least one example when `fraction > 0`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut indices: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let mut held = ((self.examples.len() as f64) * fraction).round() as usize;
        if fraction > 0.0 {
            held = held.clamp(1, self.examples.len().saturating_sub(1).max(1));
        }
        let (held_idx, kept_idx) = indices.split_at(held);
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| self.examples[i].clone()).collect()
        };
        (
            Dataset {
                examples: pick(kept_idx),
                provenance: self.provenance,
            },
            Dataset {
                examples: pick(held_idx),
                provenance: self.provenance,
            },
        )
    }

    // ---- file I/O ----

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let content = std::fs::read_to_string(path)?;
        let provenance = Provenance::Original;
        if content.trim_start().starts_with('{') {
            Self::from_jsonl(&content, provenance)
        } else {
            Self::from_tsv(&content, provenance)
        }
    }

    pub fn from_tsv(content: &str, provenance: Provenance) -> Result<Self, DataError> {
        let mut examples = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(DataError::BadRecord {
                    line: lineno + 1,
                    expected: 3,
                    found: fields.len(),
                });
            }
            let labels = if fields[2].is_empty() {
                LabelSet::EMPTY
            } else {
                LabelSet::from_names(fields[2].split(','))?
            };
            examples.push(Example {
                id: fields[0].to_string(),
                text: fields[1].to_string(),
                labels,
            });
        }
        Dataset::new(examples, provenance)
    }

    pub fn from_jsonl(content: &str, provenance: Provenance) -> Result<Self, DataError> {
        #[derive(Deserialize)]
        struct Record {
            id: String,
            text: String,
            labels: Vec<String>,
        }
        let mut examples = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|source| DataError::BadJson {
                line: lineno + 1,
                source,
            })?;
            examples.push(Example {
                id: rec.id,
                text: rec.text,
                labels: LabelSet::from_names(&rec.labels)?,
            });
        }
        Dataset::new(examples, provenance)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&ex.id);
            out.push('\t');
            out.push_str(&ex.text);
            out.push('\t');
            out.push_str(&ex.labels.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            id: &'a str,
            text: &'a str,
            labels: Vec<&'static str>,
        }
        let mut out = String::new();
        for ex in &self.examples {
            let rec = Record {
                id: &ex.id,
                text: &ex.text,
                labels: ex.labels.names(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_tsv())?)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_jsonl())?)
    }
}

/// Per-label absolute frequency and probability (percent of examples).
#[derive(Clone, Debug, Serialize)]
pub struct LabelDistribution {
    pub total: usize,
    /// `(frequency, percent)` in label order.
    pub per_label: [(usize, f64); NUM_LABELS],
}

/// Counts how often each label occurs; probability is frequency / N as a
/// percentage.
pub fn label_distribution(dataset: &Dataset) -> Result<LabelDistribution, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = dataset.len();
    let per_label = std::array::from_fn(|i| {
        let freq = dataset
            .examples
            .iter()
            .filter(|ex| ex.labels.contains(i))
            .count();
        (freq, 100.0 * freq as f64 / n as f64)
    });
    Ok(LabelDistribution {
        total: n,
        per_label,
    })
}

// ---- preprocessing ----

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:[a-z][a-z0-9+.-]*://\S+|www\.\S+)").unwrap())
}

fn punct_regex() -> &'static Regex {
    // Unicode general categories P*; symbols (S*) are left alone.
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}+").unwrap())
}

/// Lowercases, strips hyperlinks and punctuation, and collapses whitespace.
/// All-punctuation input comes back as the empty string; the caller decides
/// whether to reject the example.
pub fn preprocess(text: &str) -> String {
    let lower = text.to_lowercase();
    let without_urls = url_regex().replace_all(&lower, " ");
    let without_punct = punct_regex().replace_all(&without_urls, " ");
    without_punct.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---- vocabulary and encoding ----

/// Whitespace-token vocabulary with the five fixed special ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: OnceLock<BTreeMap<String, usize>>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Builds from preprocessed texts: every whitespace token with
    /// frequency ≥ `min_freq` gets an id, ordered by frequency descending
    /// then lexicographically.
    pub fn build(corpus: &Dataset, min_freq: usize) -> Result<Self, DataError> {
        if corpus.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in &corpus.examples {
            for tok in ex.text.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, count)| count >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = kept.into_iter().map(|(tok, _)| tok.to_string()).collect();
        Ok(Self {
            tokens,
            index: OnceLock::new(),
        })
    }

    fn index(&self) -> &BTreeMap<String, usize> {
        self.index.get_or_init(|| {
            self.tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), FIRST_CONTENT_ID + i))
                .collect()
        })
    }

    /// Total size including the five specials.
    pub fn len(&self) -> usize {
        FIRST_CONTENT_ID + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index().get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> &str {
        if id < FIRST_CONTENT_ID {
            SPECIAL_NAMES[id]
        } else {
            &self.tokens[id - FIRST_CONTENT_ID]
        }
    }

    pub fn is_special(id: usize) -> bool {
        id < FIRST_CONTENT_ID
    }

    /// Ids eligible as random replacement tokens (non-special).
    pub fn content_id_range(&self) -> std::ops::Range<usize> {
        FIRST_CONTENT_ID..self.len()
    }
}

/// Fixed-length encoded sequence: `[CLS] tokens... [SEP] [PAD]...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    /// Number of content tokens between CLS and SEP.
    content_len: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Positions holding content tokens (1..=content_len).
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.content_len
    }

    /// True where the position participates in attention (CLS, content,
    /// SEP); false at PAD.
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|p| p < self.content_len + 2).collect()
    }

    /// Builds a sequence directly from content ids (already vocabulary
    /// encoded), truncating and padding to `max_len`.
    pub fn from_content_ids(content: &[usize], max_len: usize) -> Result<Self, DataError> {
        if max_len < 3 {
            return Err(DataError::MaxLenTooSmall(max_len));
        }
        let keep = content.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&content[..keep]);
        ids.push(SEP_ID);
        ids.resize(max_len, PAD_ID);
        Ok(Self {
            ids,
            content_len: keep,
        })
    }

    /// Replaces a content token id, keeping structure invariants.
    pub fn with_id_at(&self, position: usize, id: usize) -> Self {
        let mut ids = self.ids.clone();
        ids[position] = id;
        Self {
            ids,
            content_len: self.content_len,
        }
    }
}

/// Encodes preprocessed text: CLS + token ids (UNK for out-of-vocabulary) +
/// SEP, truncated to `max_len` and PAD-filled.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, DataError> {
    if max_len < 3 {
        return Err(DataError::MaxLenTooSmall(max_len));
    }
    let content: Vec<usize> = text
        .split_whitespace()
        .map(|tok| vocab.id_of(tok))
        .collect();
    TokenSequence::from_content_ids(&content, max_len)
}

/// Inverse of [`encode`] up to whitespace normalization; specials and
/// padding are skipped.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids()
        .iter()
        .filter(|&&id| !Vocabulary::is_special(id))
        .map(|&id| vocab.token_of(id))
        .collect::<Vec<_>>()
        .join(" ")
}
