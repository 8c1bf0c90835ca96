//! Event-type registry and corpus handling.
//!
//! A corpus is a list of instances, each a pre-tokenized sentence with a
//! (possibly empty) set of gold event types. Event types are registered up
//! front: every type name is converted to a marker token such as
//! `⟨lay_off⟩`, and a reserved `⟨none⟩` marker is appended after all real
//! types so that no-event sentences have a supervision target.

pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building registries or reading corpora.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("event name {0:?} is empty after trimming and prefix removal")]
    InvalidName(String),
    #[error("duplicate event name {0:?}")]
    DuplicateName(String),
    #[error("event names {names:?} all map to the marker token {token:?}")]
    TokenCollision { token: String, names: Vec<String> },
    #[error("registry must contain at least one event type")]
    EmptyRegistry,
    #[error("instance {id:?} has no tokens")]
    EmptyTokens { id: String },
    #[error("line {line}: instance {id:?} references unknown event type {name:?}")]
    UnknownEvent { line: usize, id: String, name: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid generator settings: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Event-type registry
// ---------------------------------------------------------------------------

/// Marker token reserved for "no event in this sentence".
pub const NONE_TOKEN: &str = "\u{27e8}none\u{27e9}";

/// Converts a human-readable event type name to its marker token.
///
/// Any `Category:` prefix up to the first colon is dropped, the remainder is
/// lowercased, and runs of whitespace become single underscores. The result
/// is wrapped in angle brackets: `"Business:Lay off"` becomes `⟨lay_off⟩`.
/// Hyphens and other punctuation survive unchanged.
pub fn event_name_to_token(name: &str) -> Result<String, CorpusError> {
    let body = match name.split_once(':') {
        Some((_, rest)) => rest,
        None => name,
    };
    let body = body.trim();
    if body.is_empty() {
        return Err(CorpusError::InvalidName(name.to_string()));
    }
    let mut out = String::with_capacity(body.len() + 2);
    out.push('\u{27e8}');
    let mut in_gap = false;
    for ch in body.chars() {
        if ch.is_whitespace() {
            if !in_gap {
                out.push('_');
                in_gap = true;
            }
        } else {
            in_gap = false;
            out.extend(ch.to_lowercase());
        }
    }
    out.push('\u{27e9}');
    Ok(out)
}

/// Ordered set of event types plus the trailing `⟨none⟩` marker.
///
/// Indices `0..num_types()` are real event types in registration order;
/// index `none_index()` (the last one) is the `⟨none⟩` marker. The marker
/// order here fixes the row order used by both towers, so it must match
/// between training and inference; the checkpoint stores the name list to
/// guarantee that.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTypeRegistry {
    names: Vec<String>,
    tokens: Vec<String>,
    token_index: HashMap<String, usize>,
    name_index: HashMap<String, usize>,
}

impl EventTypeRegistry {
    /// Builds a registry from event type names, appending `⟨none⟩` last.
    ///
    /// Fails if a name is empty after conversion, if a name repeats, or if
    /// two distinct names collapse to the same marker token (including a
    /// collision with `⟨none⟩` itself).
    pub fn build<S: AsRef<str>>(names: &[S]) -> Result<Self, CorpusError> {
        if names.is_empty() {
            return Err(CorpusError::EmptyRegistry);
        }
        let mut owned: Vec<String> = Vec::with_capacity(names.len());
        let mut seen_names: HashMap<&str, ()> = HashMap::new();
        for name in names {
            let name = name.as_ref();
            if seen_names.insert(name, ()).is_some() {
                return Err(CorpusError::DuplicateName(name.to_string()));
            }
            owned.push(name.to_string());
        }
        let mut tokens: Vec<String> = Vec::with_capacity(owned.len() + 1);
        let mut by_token: HashMap<String, Vec<String>> = HashMap::new();
        for name in &owned {
            let token = event_name_to_token(name)?;
            by_token.entry(token.clone()).or_default().push(name.clone());
            tokens.push(token);
        }
        for (token, holders) in &by_token {
            let clash_with_none = token == NONE_TOKEN;
            if holders.len() > 1 || clash_with_none {
                let mut names = holders.clone();
                if clash_with_none {
                    names.push(format!("reserved marker {NONE_TOKEN}"));
                }
                return Err(CorpusError::TokenCollision { token: token.clone(), names });
            }
        }
        tokens.push(NONE_TOKEN.to_string());
        let token_index =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let name_index =
            owned.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { names: owned, tokens, token_index, name_index })
    }

    /// Number of real event types (excludes `⟨none⟩`).
    pub fn num_types(&self) -> usize {
        self.names.len()
    }

    /// Number of marker tokens including `⟨none⟩`.
    pub fn num_markers(&self) -> usize {
        self.tokens.len()
    }

    /// Index of the `⟨none⟩` marker (always the last slot).
    pub fn none_index(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Event type names in registration order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Marker tokens in registration order, `⟨none⟩` last.
    pub fn marker_tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Looks up the marker index for a marker token.
    pub fn index_of_token(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    /// Looks up the type index for an event type name.
    pub fn index_of_name(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    /// Writes the registry as `{"names": [...]}`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let record = RegistryRecord { names: self.names.clone() };
        serde_json::to_writer_pretty(BufWriter::new(file), &record)
            .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })?;
        Ok(())
    }

    /// Reads a registry previously written by [`EventTypeRegistry::save`].
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let record: RegistryRecord = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })?;
        Self::build(&record.names)
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryRecord {
    names: Vec<String>,
}

// ---------------------------------------------------------------------------
// Instances and corpora
// ---------------------------------------------------------------------------

/// One pre-tokenized sentence with its gold event types.
///
/// `gold_events` holds event type names (not marker tokens) and may be
/// empty for no-event sentences. A `BTreeSet` keeps serialization order
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold_events: BTreeSet<String>,
}

/// Corpus split tag, used in ids, filenames, and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train, dev, or test")),
        }
    }
}

/// A validated list of instances for one split, tied to a registry.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub split: Split,
    pub registry: EventTypeRegistry,
}

impl Corpus {
    /// Wraps instances after checking tokens are nonempty and every gold
    /// label is a registered type name.
    pub fn new(
        instances: Vec<Instance>,
        split: Split,
        registry: EventTypeRegistry,
    ) -> Result<Self, CorpusError> {
        for (i, inst) in instances.iter().enumerate() {
            validate_instance(inst, &registry, i + 1)?;
        }
        Ok(Self { instances, split, registry })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn validate_instance(
    inst: &Instance,
    registry: &EventTypeRegistry,
    line: usize,
) -> Result<(), CorpusError> {
    if inst.tokens.is_empty() {
        return Err(CorpusError::EmptyTokens { id: inst.id.clone() });
    }
    for name in &inst.gold_events {
        if registry.index_of_name(name).is_none() {
            return Err(CorpusError::UnknownEvent {
                line,
                id: inst.id.clone(),
                name: name.clone(),
            });
        }
    }
    Ok(())
}

/// On-disk shape of one corpus line: `{"id", "tokens", "events"}`.
#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    tokens: Vec<String>,
    events: Vec<String>,
}

/// Loads a JSONL corpus and validates it against `registry`.
///
/// Every parse or validation failure reports its 1-based line number.
/// Blank lines are skipped.
pub fn load_corpus(
    path: &Path,
    registry: &EventTypeRegistry,
    split: Split,
) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstanceRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        let inst = Instance {
            id: record.id,
            tokens: record.tokens,
            gold_events: record.events.into_iter().collect(),
        };
        validate_instance(&inst, registry, line_no)?;
        instances.push(inst);
    }
    Ok(Corpus { instances, split, registry: registry.clone() })
}

/// Writes a corpus as JSONL, one instance per line, gold labels sorted.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for inst in &corpus.instances {
        let record = InstanceRecord {
            id: inst.id.clone(),
            tokens: inst.tokens.clone(),
            events: inst.gold_events.iter().cloned().collect(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })?;
        writeln!(writer, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
