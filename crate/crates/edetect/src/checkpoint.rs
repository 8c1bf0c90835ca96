//! Single-file binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 schema version, a JSON
//! metadata block (configs, template, registry names, vocabulary tokens),
//! then every weight tensor in layout order as raw little-endian f64s with
//! a self-describing name/shape header. Weights round-trip bitwise, so a
//! loaded model reproduces every metric of the saved one exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::corpus::{CorpusError, EventTypeRegistry};
use crate::etc_tower::PromptTemplate;
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::trainer::{Model, TrainConfig, TrainError};

const MAGIC: &[u8; 8] = b"EVDTCKPT";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint schema version {got} unsupported (expected {expected})")]
    SchemaVersion { got: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor {index} is {got:?}, expected {expected:?}")]
    TensorMismatch {
        index: usize,
        got: (String, usize, usize),
        expected: (String, usize, usize),
    },
    #[error("invalid checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Rebuild(#[from] TrainError),
    #[error(transparent)]
    Registry(#[from] CorpusError),
    #[error(transparent)]
    Vocabulary(#[from] TokenizerError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Everything needed to rebuild the model besides the weights.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    backbone: BackboneConfig,
    train: TrainConfig,
    template: PromptTemplate,
    registry: Vec<String>,
    vocab: Vec<String>,
    max_len: usize,
}

/// Writes `model` and its training config to one archive at `path`.
pub fn save_checkpoint(
    model: &Model,
    train_config: &TrainConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        backbone: model.backbone.config.clone(),
        train: train_config.clone(),
        template: model.template.clone(),
        registry: model.registry.names().to_vec(),
        vocab: model.vocab.tokens().to_vec(),
        max_len: model.max_len,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));

    put(MAGIC)?;
    put(&SCHEMA_VERSION.to_le_bytes())?;
    put(&(meta_bytes.len() as u64).to_le_bytes())?;
    put(&meta_bytes)?;

    let layout = model.params.layout();
    put(&(layout.entries().len() as u32).to_le_bytes())?;
    for (t, meta) in layout.entries().iter().enumerate() {
        put(&(meta.name.len() as u32).to_le_bytes())?;
        put(meta.name.as_bytes())?;
        put(&(meta.rows as u32).to_le_bytes())?;
        put(&(meta.cols as u32).to_le_bytes())?;
        let view = model.params.mat(t);
        for &v in view.iter() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    r: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CheckpointError::Corrupt("file ends mid-record".into())
            } else {
                io_err(self.path, e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut buf = [0u8; 4];
        self.exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn bytes(&mut self, len: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; len];
        self.exact(&mut buf)?;
        Ok(buf)
    }
}

/// Reads an archive written by [`save_checkpoint`], rebuilding the full
/// model with bitwise-identical weights.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig), CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { r: BufReader::new(file), path };

    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(CheckpointError::SchemaVersion { got: version, expected: SCHEMA_VERSION });
    }

    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(meta_len)?)?;
    let registry = EventTypeRegistry::build(&meta.registry)?;
    let vocab = Vocabulary::from_tokens(meta.vocab, &registry)?;
    let mut model =
        Model::new(meta.backbone, vocab, registry, meta.template, meta.max_len)?;

    let layout = std::sync::Arc::clone(model.params.layout());
    let count = r.u32()? as usize;
    if count != layout.entries().len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} tensors in archive, layout has {}",
            layout.entries().len()
        )));
    }
    for (t, expected) in layout.entries().iter().enumerate() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| CheckpointError::Corrupt(format!("tensor {t} name is not utf-8")))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if name != expected.name || rows != expected.rows || cols != expected.cols {
            return Err(CheckpointError::TensorMismatch {
                index: t,
                got: (name, rows, cols),
                expected: (expected.name.clone(), expected.rows, expected.cols),
            });
        }
        let mut view = model.params.mat_mut(t);
        let mut buf = [0u8; 8];
        for v in view.iter_mut() {
            r.exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }

    let mut probe = [0u8; 1];
    match r.r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(CheckpointError::Corrupt("trailing bytes after tensors".into())),
        Err(e) => return Err(io_err(path, e)),
    }

    Ok((model, meta.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Instance, Split};
    use crate::inference::{predict, CombinationMode};
    use std::collections::BTreeSet;

    fn fixture_model() -> Model {
        let registry = EventTypeRegistry::build(&["Alpha", "Bravo"]).unwrap();
        let corpus = Corpus::new(
            vec![Instance {
                id: "t-0".into(),
                tokens: vec!["ripe".into(), "mox".into(), "lun".into()],
                gold_events: BTreeSet::from(["Alpha".to_string()]),
            }],
            Split::Train,
            registry.clone(),
        )
        .unwrap();
        let vocab = Vocabulary::build(&[&corpus], &registry, 1).unwrap();
        let arch = BackboneConfig {
            depth: 1,
            width: 16,
            heads: 2,
            max_positions: 32,
            init_std: 0.2,
            seed: 9,
            ..BackboneConfig::default()
        };
        Model::new(
            arch,
            vocab,
            registry,
            PromptTemplate::find_builtin("prompt_2").unwrap(),
            32,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_settings_bitwise() {
        let model = fixture_model();
        let config = TrainConfig { epochs: 3, seed: 42, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &config, &path).unwrap();

        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.data, model.params.data);
        assert_eq!(loaded_config, config);
        assert_eq!(loaded.backbone.config, model.backbone.config);
        assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
        assert_eq!(loaded.registry, model.registry);
        assert_eq!(loaded.template, model.template);
        assert_eq!(loaded.max_len, model.max_len);
    }

    #[test]
    fn save_load_save_produces_identical_archives() {
        let model = fixture_model();
        let config = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        save_checkpoint(&model, &config, &first).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&first).unwrap();
        save_checkpoint(&loaded, &loaded_config, &second).unwrap();
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &TrainConfig::default(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let tokens: Vec<String> = ["ripe", "lun"].iter().map(|s| s.to_string()).collect();
        let before = predict(&model, &tokens, CombinationMode::Union).unwrap();
        let after = predict(&loaded, &tokens, CombinationMode::Union).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn rejects_bad_magic_and_wrong_version() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &TrainConfig::default(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        bytes[0] ^= 0xff;
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::SchemaVersion { got: 99, expected: 1 })
        ));
    }

    #[test]
    fn rejects_truncated_and_padded_archives() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &TrainConfig::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));

        let mut padded = bytes.clone();
        padded.push(0);
        std::fs::write(&path, &padded).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }
}
