//! Word-level vocabulary and assembly of the two tower input encodings.
//!
//! Tokenization is plain whitespace word splitting; event markers and the
//! reserved soft-prompt tokens are single vocabulary entries and are never
//! split. The recognition encoding appends all markers after the sentence;
//! the cloze encoding wraps the sentence in a prompt template. Encoders emit
//! unpadded sequences; [`TokenizedInput::pad_to`] appends tail padding.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EventTypeRegistry, Instance};
use crate::etc_tower::{apply_prompt, PromptTemplate, TemplateError};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Number of reserved trainable soft-prompt slots in every vocabulary.
pub const SOFT_TOKEN_COUNT: usize = 4;

/// Surface form of the `k`-th reserved soft-prompt token.
pub fn soft_token(k: usize) -> String {
    format!("\u{27e8}soft_{k}\u{27e9}")
}

/// Tokenizer and encoding errors.
#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from zero corpora")]
    EmptyCorpora,
    #[error("max_len {max_len} cannot hold the fixed layout of {needed} tokens")]
    Capacity { needed: usize, max_len: usize },
    #[error("vocabulary is missing required token {0:?}")]
    MissingToken(String),
    #[error("vocabulary contains duplicate token {0:?}")]
    DuplicateToken(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary parse error: {0}")]
    Json(String),
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token-to-id table covering specials, soft-prompt slots, event markers,
/// and corpus words. Immutable once built; ids index embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    event_ids: Vec<usize>,
    soft_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from training corpora.
    ///
    /// Layout: the five specials, then the reserved soft tokens, then all
    /// marker tokens in registry order, then corpus words with frequency
    /// ≥ `min_freq` in lexicographic order. Rarer words encode as `[UNK]`.
    pub fn build(
        corpora: &[&Corpus],
        registry: &EventTypeRegistry,
        min_freq: usize,
    ) -> Result<Self, TokenizerError> {
        if corpora.is_empty() {
            return Err(TokenizerError::EmptyCorpora);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for corpus in corpora {
            for inst in &corpus.instances {
                for tok in &inst.tokens {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].map(str::to_string).into();
        tokens.extend((0..SOFT_TOKEN_COUNT).map(soft_token));
        tokens.extend(registry.marker_tokens().iter().cloned());
        let reserved: std::collections::HashSet<&str> =
            tokens.iter().map(|s| s.as_str()).collect();
        // A surface word that collides with a reserved token keeps the
        // reserved id rather than getting a second row.
        let base: Vec<String> = freq
            .into_iter()
            .filter(|&(tok, count)| count >= min_freq && !reserved.contains(tok))
            .map(|(tok, _)| tok.to_string())
            .collect();
        tokens.extend(base);
        Self::from_tokens(tokens, registry)
    }

    /// Reconstructs a vocabulary from an explicit token list, validating
    /// that the specials, soft tokens, and all registry markers are present
    /// and that no token repeats.
    pub fn from_tokens(
        tokens: Vec<String>,
        registry: &EventTypeRegistry,
    ) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i).is_some() {
                return Err(TokenizerError::DuplicateToken(tok.clone()));
            }
        }
        let require = |tok: &str| {
            ids.get(tok).copied().ok_or_else(|| TokenizerError::MissingToken(tok.to_string()))
        };
        for special in [PAD, UNK, CLS, SEP, MASK] {
            require(special)?;
        }
        let soft_ids =
            (0..SOFT_TOKEN_COUNT).map(|k| require(&soft_token(k))).collect::<Result<_, _>>()?;
        let event_ids = registry
            .marker_tokens()
            .iter()
            .map(|t| require(t))
            .collect::<Result<_, _>>()?;
        Ok(Self { tokens, ids, event_ids, soft_ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or the `[UNK]` id for out-of-vocabulary words.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| self.unk_id())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.ids[PAD]
    }

    pub fn unk_id(&self) -> usize {
        self.ids[UNK]
    }

    pub fn cls_id(&self) -> usize {
        self.ids[CLS]
    }

    pub fn sep_id(&self) -> usize {
        self.ids[SEP]
    }

    pub fn mask_id(&self) -> usize {
        self.ids[MASK]
    }

    /// Marker-token ids in registry order (`⟨none⟩` last).
    pub fn event_ids(&self) -> &[usize] {
        &self.event_ids
    }

    /// Reserved soft-prompt token ids in slot order.
    pub fn soft_ids(&self) -> &[usize] {
        &self.soft_ids
    }

    /// Maps ids back to surface tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.tokens[id].clone()).collect()
    }

    /// Writes the vocabulary as `{"tokens": [...]}` with index = id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = File::create(path)
            .map_err(|e| TokenizerError::Io { path: path.display().to_string(), source: e })?;
        let record = VocabRecord { tokens: self.tokens.clone() };
        serde_json::to_writer_pretty(BufWriter::new(file), &record)
            .map_err(|e| TokenizerError::Json(e.to_string()))
    }

    /// Reads a vocabulary written by [`Vocabulary::save`].
    pub fn load(path: &Path, registry: &EventTypeRegistry) -> Result<Self, TokenizerError> {
        let file = File::open(path)
            .map_err(|e| TokenizerError::Io { path: path.display().to_string(), source: e })?;
        let record: VocabRecord = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| TokenizerError::Json(e.to_string()))?;
        Self::from_tokens(record.tokens, registry)
    }
}

// ---------------------------------------------------------------------------
// Encodings
// ---------------------------------------------------------------------------

/// One encoded sequence plus the positions the towers need.
///
/// Exactly one of `event_span` (recognition mode) and `mask_position`
/// (cloze mode) is set. Spans are `[start, end)` into `ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub sentence_span: (usize, usize),
    pub event_span: Option<(usize, usize)>,
    pub mask_position: Option<usize>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `[PAD]` ids (mask 0) until the sequence has length `len`.
    pub fn pad_to(&mut self, len: usize, pad_id: usize) {
        assert!(len >= self.ids.len(), "pad_to cannot shrink a sequence");
        self.ids.resize(len, pad_id);
        self.attention_mask.resize(len, 0);
    }
}

/// Encodes an instance for the recognition tower.
///
/// Layout: `[CLS]` sentence `[SEP]` markers `[SEP]`, with all `N+1` marker
/// tokens in registry order. Markers are never truncated; the sentence is
/// shortened to fit `max_len`. Fails when even an empty sentence would not
/// fit, i.e. when `max_len < N + 4`.
pub fn encode_rce(
    instance: &Instance,
    registry: &EventTypeRegistry,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenizedInput, TokenizerError> {
    let markers = registry.num_markers();
    let overhead = markers + 3;
    if max_len < overhead {
        return Err(TokenizerError::Capacity { needed: overhead, max_len });
    }
    let keep = instance.tokens.len().min(max_len - overhead);
    let mut ids = Vec::with_capacity(keep + overhead);
    ids.push(vocab.cls_id());
    ids.extend(instance.tokens[..keep].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(vocab.sep_id());
    let event_start = ids.len();
    ids.extend_from_slice(vocab.event_ids());
    ids.push(vocab.sep_id());
    Ok(TokenizedInput {
        attention_mask: vec![1; ids.len()],
        sentence_span: (1, 1 + keep),
        event_span: Some((event_start, event_start + markers)),
        mask_position: None,
        ids,
    })
}

/// Encodes an instance for the cloze tower.
///
/// Layout: `[CLS]` prompt-wrapped sentence `[SEP]` with exactly one `[MASK]`
/// inside. The sentence is truncated before any template text would be;
/// fails when the template alone does not fit in `max_len`.
pub fn encode_etc(
    instance: &Instance,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenizedInput, TokenizerError> {
    template.validate()?;
    let overhead = template.fixed_token_count() + 2;
    if max_len < overhead {
        return Err(TokenizerError::Capacity { needed: overhead, max_len });
    }
    let keep = instance.tokens.len().min(max_len - overhead);
    let wrapped = apply_prompt(&instance.tokens[..keep], template)?;
    let mut ids = Vec::with_capacity(wrapped.len() + 2);
    ids.push(vocab.cls_id());
    let mut mask_position = None;
    for tok in &wrapped {
        if tok == MASK {
            debug_assert!(mask_position.is_none(), "template validation enforces one mask");
            mask_position = Some(ids.len());
        }
        ids.push(vocab.id_or_unk(tok));
    }
    ids.push(vocab.sep_id());
    let mask_position = mask_position.expect("validated template contains a mask");
    let sentence_start = 1 + template.sentence_offset();
    Ok(TokenizedInput {
        attention_mask: vec![1; ids.len()],
        sentence_span: (sentence_start, sentence_start + keep),
        event_span: None,
        mask_position: Some(mask_position),
        ids,
    })
}
