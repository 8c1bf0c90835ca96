//! Synthetic corpus generator with planted lexical cues.
//!
//! Each event type owns a few unique cue words; sentences are filler words
//! plus the cues of the types they express, so the gold label set of a
//! sentence is exactly the set of types whose cues appear in it. This keeps
//! the task learnable by a small model while exercising the full multi-label
//! pipeline. Generation is deterministic: the same settings and seed produce
//! byte-identical JSONL files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, EventTypeRegistry, Instance, Split};
use crate::nn::mix_seed;

/// Settings for the generator. `vocab_size` counts cue and filler words
/// together; counts are per split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_types: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub multi_event_rate: f64,
    pub none_rate: f64,
    pub vocab_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_types: 10,
            train: 2000,
            dev: 400,
            test: 400,
            multi_event_rate: 0.2,
            none_rate: 0.3,
            vocab_size: 300,
        }
    }
}

/// Records which cue word belongs to which event type, so tests and tools
/// can re-derive gold labels without the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueManifest {
    pub cues: BTreeMap<String, String>,
    pub seed: u64,
}

impl CueManifest {
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path)
            .map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)
            .map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })
    }
}

/// Generator output: three splits sharing one registry, plus the cue map.
#[derive(Debug, Clone)]
pub struct SyntheticCorpora {
    pub registry: EventTypeRegistry,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub manifest: CueManifest,
}

const MIN_FILLERS: usize = 20;
const MAX_CUES_PER_TYPE: usize = 4;
const SENTENCE_LEN: std::ops::RangeInclusive<usize> = 6..=10;

const TYPE_NAMES: [&str; 26] = [
    "Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India",
    "Juliett", "Kilo", "Lima", "Mike", "November", "Oscar", "Papa", "Quebec", "Romeo",
    "Sierra", "Tango", "Uniform", "Victor", "Whiskey", "Xray", "Yankee", "Zulu",
];

// No syllable is a prefix of another, so concatenations of two or three of
// them are distinct words.
const SYLLABLES: [&str; 24] = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "ri", "so",
    "tu", "va", "we", "xi", "yo", "zu", "bra", "cle", "dri", "fla",
];

fn pseudo_word(i: usize) -> String {
    let n = SYLLABLES.len();
    if i < n * n {
        format!("{}{}", SYLLABLES[i / n], SYLLABLES[i % n])
    } else {
        let j = i - n * n;
        format!("{}{}{}", SYLLABLES[j / (n * n)], SYLLABLES[(j / n) % n], SYLLABLES[j % n])
    }
}

fn type_name(i: usize) -> String {
    if i < TYPE_NAMES.len() {
        TYPE_NAMES[i].to_string()
    } else {
        format!("Type{}", i + 1)
    }
}

/// Generates three deterministic splits from `spec` and `seed`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpora, CorpusError> {
    validate_spec(spec)?;
    let names: Vec<String> = (0..spec.num_types).map(type_name).collect();
    let registry = EventTypeRegistry::build(&names)?;

    // Assignment of words to roles uses its own stream so that changing a
    // split size never reshuffles the lexicon.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let mut pool: Vec<String> = (0..spec.vocab_size).map(pseudo_word).collect();
    pool.shuffle(&mut rng);

    let mut cues_by_type: Vec<Vec<String>> = Vec::with_capacity(spec.num_types);
    let mut manifest = CueManifest { cues: BTreeMap::new(), seed };
    let mut next = 0usize;
    for t in 0..spec.num_types {
        let count = rng.random_range(2..=MAX_CUES_PER_TYPE);
        let words: Vec<String> = pool[next..next + count].to_vec();
        next += count;
        for w in &words {
            manifest.cues.insert(w.clone(), names[t].clone());
        }
        cues_by_type.push(words);
    }
    let fillers: Vec<String> = pool[next..].to_vec();

    let make = |split: Split, n: usize, salt: u64| -> Result<Corpus, CorpusError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt));
        generate_split(spec, split, n, &registry, &cues_by_type, &fillers, &mut rng)
    };
    Ok(SyntheticCorpora {
        train: make(Split::Train, spec.train, 1)?,
        dev: make(Split::Dev, spec.dev, 2)?,
        test: make(Split::Test, spec.test, 3)?,
        registry,
        manifest,
    })
}

fn validate_spec(spec: &SynthSpec) -> Result<(), CorpusError> {
    if spec.num_types == 0 {
        return Err(CorpusError::InvalidSpec("num_types must be at least 1".into()));
    }
    for (name, rate) in [("multi_event_rate", spec.multi_event_rate), ("none_rate", spec.none_rate)]
    {
        if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
            return Err(CorpusError::InvalidSpec(format!(
                "{name} must lie in [0, 1], got {rate}"
            )));
        }
    }
    if spec.multi_event_rate + spec.none_rate > 1.0 {
        return Err(CorpusError::InvalidSpec(
            "multi_event_rate + none_rate must not exceed 1".into(),
        ));
    }
    if spec.num_types < 2 && spec.multi_event_rate > 0.0 {
        return Err(CorpusError::InvalidSpec(
            "multi_event_rate > 0 requires at least two event types".into(),
        ));
    }
    let max_cues = spec.num_types * MAX_CUES_PER_TYPE;
    if spec.vocab_size < max_cues + MIN_FILLERS {
        return Err(CorpusError::InvalidSpec(format!(
            "vocab_size {} too small: need at least {} for {} types",
            spec.vocab_size,
            max_cues + MIN_FILLERS,
            spec.num_types
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Kind {
    None,
    Single,
    Multi,
}

fn generate_split(
    spec: &SynthSpec,
    split: Split,
    n: usize,
    registry: &EventTypeRegistry,
    cues_by_type: &[Vec<String>],
    fillers: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Corpus, CorpusError> {
    // Exact composition: rounding fixes the no-event and multi-event counts,
    // the remainder is single-event.
    let n_none = (spec.none_rate * n as f64).round() as usize;
    let n_multi = ((spec.multi_event_rate * n as f64).round() as usize).min(n - n_none);
    let n_single = n - n_none - n_multi;

    let mut kinds = Vec::with_capacity(n);
    kinds.extend(std::iter::repeat_n(Kind::None, n_none));
    kinds.extend(std::iter::repeat_n(Kind::Multi, n_multi));
    kinds.extend(std::iter::repeat_n(Kind::Single, n_single));
    kinds.shuffle(rng);

    let max_multi = spec.num_types.min(3);
    let mut instances = Vec::with_capacity(n);
    for (i, kind) in kinds.into_iter().enumerate() {
        let len = rng.random_range(SENTENCE_LEN);
        let types: Vec<usize> = match kind {
            Kind::None => Vec::new(),
            Kind::Single => vec![rng.random_range(0..spec.num_types)],
            Kind::Multi => {
                let k = rng.random_range(2..=max_multi);
                rand::seq::index::sample(rng, spec.num_types, k).into_vec()
            }
        };
        let mut tokens: Vec<String> =
            (0..len).map(|_| fillers.choose(rng).unwrap().clone()).collect();
        let slots = rand::seq::index::sample(rng, len, types.len());
        for (slot, &t) in slots.iter().zip(&types) {
            tokens[slot] = cues_by_type[t].choose(rng).unwrap().clone();
        }
        instances.push(Instance {
            id: format!("{}-{:05}", split.as_str(), i),
            tokens,
            gold_events: types.iter().map(|&t| registry.names()[t].clone()).collect(),
        });
    }
    Corpus::new(instances, split, registry.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_corpus;
    use std::collections::BTreeSet;

    fn small_spec() -> SynthSpec {
        SynthSpec { num_types: 5, train: 200, dev: 50, test: 50, vocab_size: 120, ..SynthSpec::default() }
    }

    #[test]
    fn generation_is_deterministic_down_to_bytes() {
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let mut rounds = Vec::new();
        for round in 0..2 {
            let out = generate(&spec, 11).unwrap();
            let path = dir.path().join(format!("train-{round}.jsonl"));
            save_corpus(&out.train, &path).unwrap();
            rounds.push((std::fs::read(&path).unwrap(), out.manifest.clone()));
        }
        assert_eq!(rounds[0].0, rounds[1].0);
        assert_eq!(rounds[0].1, rounds[1].1);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = small_spec();
        let a = generate(&spec, 1).unwrap();
        let b = generate(&spec, 2).unwrap();
        assert_ne!(a.train.instances, b.train.instances);
    }

    #[test]
    fn split_composition_matches_rates_exactly() {
        let spec = SynthSpec { train: 1000, ..small_spec() };
        let out = generate(&spec, 3).unwrap();
        let n_none =
            out.train.instances.iter().filter(|i| i.gold_events.is_empty()).count();
        let n_multi =
            out.train.instances.iter().filter(|i| i.gold_events.len() > 1).count();
        assert_eq!(n_none, 300);
        assert_eq!(n_multi, 200);
    }

    #[test]
    fn gold_labels_match_planted_cues() {
        let out = generate(&small_spec(), 5).unwrap();
        for corpus in [&out.train, &out.dev, &out.test] {
            for inst in &corpus.instances {
                let derived: BTreeSet<String> = inst
                    .tokens
                    .iter()
                    .filter_map(|tok| out.manifest.cues.get(tok).cloned())
                    .collect();
                assert_eq!(derived, inst.gold_events, "instance {}", inst.id);
            }
        }
    }

    #[test]
    fn cue_words_are_unique_per_type() {
        let out = generate(&small_spec(), 9).unwrap();
        // The manifest maps each cue to exactly one type, and each type owns
        // between two and four cues.
        let mut per_type: BTreeMap<&str, usize> = BTreeMap::new();
        for ty in out.manifest.cues.values() {
            *per_type.entry(ty).or_default() += 1;
        }
        assert_eq!(per_type.len(), 5);
        for (_, count) in per_type {
            assert!((2..=4).contains(&count));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_rate = SynthSpec { none_rate: 1.5, ..small_spec() };
        assert!(generate(&bad_rate, 1).is_err());
        let bad_sum = SynthSpec { none_rate: 0.6, multi_event_rate: 0.6, ..small_spec() };
        assert!(generate(&bad_sum, 1).is_err());
        let bad_vocab = SynthSpec { vocab_size: 30, ..small_spec() };
        assert!(generate(&bad_vocab, 1).is_err());
        let bad_multi = SynthSpec { num_types: 1, ..small_spec() };
        assert!(generate(&bad_multi, 1).is_err());
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: BTreeSet<String> = (0..600).map(pseudo_word).collect();
        assert_eq!(words.len(), 600);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let out = generate(&small_spec(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cues.json");
        out.manifest.save(&path).unwrap();
        assert_eq!(CueManifest::load(&path).unwrap(), out.manifest);
    }
}
