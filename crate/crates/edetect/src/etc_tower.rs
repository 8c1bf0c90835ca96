//! Cloze tower: prompt templates, mask-slot score selection, the two
//! ranking losses, and the threshold-against-`⟨none⟩` prediction rule.
//!
//! A prompt template wraps the sentence and contributes exactly one `[MASK]`
//! slot. The encoder's masked-token head scores the full vocabulary at that
//! slot; this module gathers the `N+1` marker-token scores and either trains
//! them (push gold markers above `⟨none⟩`, push `⟨none⟩` above the rest) or
//! thresholds them to a label set.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EventTypeRegistry;
use crate::tokenizer::{Vocabulary, MASK, SOFT_TOKEN_COUNT};

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// Hard templates are fixed words; soft templates also reserve trainable
/// placeholder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Hard,
    Soft,
}

/// A prompt with one `[SENTENCE]` slot and one `[MASK]` slot.
///
/// `text` is whitespace-tokenized. Besides the two required placeholders it
/// may contain `[TOKEN]` markers (soft templates only), each standing for
/// one trainable soft-prompt embedding; `soft_count` must equal their
/// number. All other words are lowercased when applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub text: String,
    pub soft_count: usize,
}

/// Template validation and registry-file errors.
#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {0:?} must contain exactly one [MASK] placeholder")]
    MaskCount(String),
    #[error("template {0:?} must contain exactly one [SENTENCE] placeholder")]
    SentenceCount(String),
    #[error("template {name:?}: soft_count {soft_count} but {placeholders} [TOKEN] placeholders")]
    SoftCountMismatch { name: String, soft_count: usize, placeholders: usize },
    #[error("template {name:?}: soft_count must be between 1 and {max} for soft templates")]
    SoftCountRange { name: String, max: usize },
    #[error("hard template {0:?} must not contain [TOKEN] placeholders")]
    HardWithSoftTokens(String),
    #[error("no template named {0:?} in the registry")]
    UnknownTemplate(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template registry parse error: {0}")]
    Json(String),
}

enum Piece<'a> {
    Word(&'a str),
    Sentence,
    Mask,
    Soft,
}

impl PromptTemplate {
    pub fn hard(name: &str, text: &str) -> Self {
        Self { name: name.into(), kind: TemplateKind::Hard, text: text.into(), soft_count: 0 }
    }

    pub fn soft(name: &str, text: &str, soft_count: usize) -> Self {
        Self { name: name.into(), kind: TemplateKind::Soft, text: text.into(), soft_count }
    }

    fn pieces(&self) -> impl Iterator<Item = Piece<'_>> {
        self.text.split_whitespace().map(|word| match word {
            "[SENTENCE]" => Piece::Sentence,
            "[MASK]" => Piece::Mask,
            "[TOKEN]" => Piece::Soft,
            other => Piece::Word(other),
        })
    }

    /// Checks the placeholder structure against the template's kind.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let (mut masks, mut sentences, mut softs) = (0usize, 0usize, 0usize);
        for piece in self.pieces() {
            match piece {
                Piece::Mask => masks += 1,
                Piece::Sentence => sentences += 1,
                Piece::Soft => softs += 1,
                Piece::Word(_) => {}
            }
        }
        if masks != 1 {
            return Err(TemplateError::MaskCount(self.name.clone()));
        }
        if sentences != 1 {
            return Err(TemplateError::SentenceCount(self.name.clone()));
        }
        match self.kind {
            TemplateKind::Hard => {
                if softs > 0 || self.soft_count > 0 {
                    return Err(TemplateError::HardWithSoftTokens(self.name.clone()));
                }
            }
            TemplateKind::Soft => {
                if self.soft_count == 0 || self.soft_count > SOFT_TOKEN_COUNT {
                    return Err(TemplateError::SoftCountRange {
                        name: self.name.clone(),
                        max: SOFT_TOKEN_COUNT,
                    });
                }
                if softs != self.soft_count {
                    return Err(TemplateError::SoftCountMismatch {
                        name: self.name.clone(),
                        soft_count: self.soft_count,
                        placeholders: softs,
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of tokens the template contributes besides the sentence.
    pub fn fixed_token_count(&self) -> usize {
        self.pieces().filter(|p| !matches!(p, Piece::Sentence)).count()
    }

    /// Number of template tokens preceding the sentence slot.
    pub fn sentence_offset(&self) -> usize {
        self.pieces().take_while(|p| !matches!(p, Piece::Sentence)).count()
    }

    /// The built-in template registry: the default prompt, the four
    /// alternative hard prompts, and one soft prompt.
    pub fn builtin() -> Vec<PromptTemplate> {
        vec![
            Self::hard("default", "[SENTENCE] This sentence describes a [MASK] event"),
            Self::hard("prompt_1", "What happened? [SENTENCE] This sentence describes a [MASK] event"),
            Self::hard(
                "prompt_2",
                "[SENTENCE] What event does the previous sentence describe? It was a [MASK] event",
            ),
            Self::hard("prompt_3", "[SENTENCE] It was [MASK]"),
            Self::hard("prompt_4", "A [MASK] event: [SENTENCE]"),
            Self::soft("soft", "[TOKEN] [TOKEN] [SENTENCE] [TOKEN] [TOKEN] [MASK]", 4),
        ]
    }

    /// Looks up a built-in template by name.
    pub fn find_builtin(name: &str) -> Result<PromptTemplate, TemplateError> {
        Self::builtin()
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    /// Writes a template list as a JSON array.
    pub fn save_registry(templates: &[PromptTemplate], path: &Path) -> Result<(), TemplateError> {
        let file = File::create(path)
            .map_err(|e| TemplateError::Io { path: path.display().to_string(), source: e })?;
        serde_json::to_writer_pretty(BufWriter::new(file), templates)
            .map_err(|e| TemplateError::Json(e.to_string()))
    }

    /// Reads a JSON array of templates and validates each entry.
    pub fn load_registry(path: &Path) -> Result<Vec<PromptTemplate>, TemplateError> {
        let file = File::open(path)
            .map_err(|e| TemplateError::Io { path: path.display().to_string(), source: e })?;
        let templates: Vec<PromptTemplate> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| TemplateError::Json(e.to_string()))?;
        for t in &templates {
            t.validate()?;
        }
        Ok(templates)
    }
}

/// Substitutes the placeholders of `template` around `sentence`.
///
/// Fixed words are lowercased, `[MASK]` survives verbatim, and `[TOKEN]`
/// placeholders become the reserved soft tokens `⟨soft_0⟩`, `⟨soft_1⟩`, ...
/// in reading order. No other mutation happens; truncation is the encoder's
/// job and must run before this.
pub fn apply_prompt(
    sentence: &[String],
    template: &PromptTemplate,
) -> Result<Vec<String>, TemplateError> {
    template.validate()?;
    let mut out = Vec::with_capacity(sentence.len() + template.fixed_token_count());
    let mut soft_index = 0usize;
    for piece in template.pieces() {
        match piece {
            Piece::Sentence => out.extend(sentence.iter().cloned()),
            Piece::Mask => out.push(MASK.to_string()),
            Piece::Soft => {
                out.push(crate::tokenizer::soft_token(soft_index));
                soft_index += 1;
            }
            Piece::Word(w) => out.push(w.to_lowercase()),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scores over marker tokens
// ---------------------------------------------------------------------------

/// Errors from score selection.
#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("marker token {0:?} is missing from the vocabulary")]
    MissingMarker(String),
    #[error("expected {expected} vocabulary scores, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Raw mask-slot scores of the `N+1` marker tokens, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct EtcScores {
    pub scores: Array1<f64>,
}

impl EtcScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Softmax over the marker scores, for calibrated reporting only; the
    /// prediction rule compares raw scores and is invariant to this choice.
    pub fn probabilities(&self) -> Array1<f64> {
        let max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp = self.scores.mapv(|v| (v - max).exp());
        let sum = exp.sum();
        exp / sum
    }
}

/// Gathers the marker-token entries of a vocabulary-wide score vector.
pub fn select_event_scores(
    vocab_scores: &ArrayView1<f64>,
    registry: &EventTypeRegistry,
    vocab: &Vocabulary,
) -> Result<EtcScores, ScoreError> {
    if vocab_scores.len() != vocab.len() {
        return Err(ScoreError::LengthMismatch { expected: vocab.len(), got: vocab_scores.len() });
    }
    let mut scores = Array1::zeros(registry.num_markers());
    for (i, token) in registry.marker_tokens().iter().enumerate() {
        let id = vocab.id(token).ok_or_else(|| ScoreError::MissingMarker(token.clone()))?;
        scores[i] = vocab_scores[id];
    }
    Ok(EtcScores { scores })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// How the positive set `T` is formed during training: from gold labels
/// (default) or from the current scores (ablation).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TDefinition {
    #[default]
    Gold,
    Score,
}

impl std::str::FromStr for TDefinition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(TDefinition::Gold),
            "score" => Ok(TDefinition::Score),
            other => Err(format!("unknown t-definition {other:?}, expected gold or score")),
        }
    }
}

/// Splits real-type indices into the positive set `T` and its complement
/// `T̄` (the `⟨none⟩` slot belongs to neither). Under the score definition,
/// ties with `⟨none⟩` fall in neither set.
fn partition(
    scores: &EtcScores,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
    t_def: TDefinition,
) -> (Vec<usize>, Vec<usize>) {
    let s_none = scores.scores[registry.none_index()];
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, name) in registry.names().iter().enumerate() {
        let in_t = match t_def {
            TDefinition::Gold => gold_events.contains(name),
            TDefinition::Score => scores.scores[i] > s_none,
        };
        if in_t {
            pos.push(i);
        } else if t_def == TDefinition::Gold || scores.scores[i] < s_none {
            neg.push(i);
        }
    }
    (pos, neg)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ranking loss of the cloze tower with the gold-label positive set.
///
/// The first term pushes each positive marker above `⟨none⟩` (mean of the
/// pairwise binary cross-entropies); the second pushes `⟨none⟩` above all
/// remaining markers jointly. Either term vanishes when its set is empty.
/// Both are negative log-likelihoods, so the sum is minimized.
pub fn etc_loss(
    scores: &EtcScores,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
) -> f64 {
    etc_loss_with(scores, gold_events, registry, TDefinition::Gold)
}

/// [`etc_loss`] with an explicit positive-set definition.
pub fn etc_loss_with(
    scores: &EtcScores,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
    t_def: TDefinition,
) -> f64 {
    etc_loss_grad(scores, gold_events, registry, t_def).0
}

/// Loss plus its closed-form gradient with respect to the marker scores.
pub fn etc_loss_grad(
    scores: &EtcScores,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
    t_def: TDefinition,
) -> (f64, Array1<f64>) {
    let (pos, neg) = partition(scores, gold_events, registry, t_def);
    let none = registry.none_index();
    let s = &scores.scores;
    let s_none = s[none];
    let mut grad = Array1::zeros(s.len());
    let mut loss = 0.0;

    if !pos.is_empty() {
        let w = 1.0 / pos.len() as f64;
        for &t in &pos {
            loss += w * softplus(s_none - s[t]);
            let sig = sigmoid(s[t] - s_none);
            grad[t] += w * (sig - 1.0);
            grad[none] += w * (1.0 - sig);
        }
    }

    if !neg.is_empty() {
        // Softmax over {⟨none⟩} ∪ T̄; the loss is −log π(⟨none⟩).
        let max = neg.iter().map(|&t| s[t]).fold(s_none, f64::max);
        let e_none = (s_none - max).exp();
        let z: f64 = e_none + neg.iter().map(|&t| (s[t] - max).exp()).sum::<f64>();
        loss += z.ln() - (s_none - max);
        grad[none] += e_none / z - 1.0;
        for &t in &neg {
            grad[t] += (s[t] - max).exp() / z;
        }
    }

    (loss, grad)
}

/// Label set of the cloze tower: every type scoring strictly above `⟨none⟩`.
pub fn etc_predict(scores: &EtcScores, registry: &EventTypeRegistry) -> BTreeSet<String> {
    let s_none = scores.scores[registry.none_index()];
    registry
        .names()
        .iter()
        .enumerate()
        .filter(|&(i, _)| scores.scores[i] > s_none)
        .map(|(_, name)| name.clone())
        .collect()
}
