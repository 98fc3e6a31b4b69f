//! Checkpoint directories: `manifest.json`, `weights.bin` (little-endian
//! f32, row-major, manifest order), and the tokenizer files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelConfig, ModelError};
use crate::engine::{ParamStore, Tensor};
use crate::tokenizer::Tokenizer;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub lineage: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub tokenizer: Tokenizer,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the checkpoint and its tokenizer into `dir`.
pub fn save_checkpoint(ck: &Checkpoint, tokenizer: &Tokenizer, dir: &Path) -> Result<(), ModelError> {
    ck.check_vocab(tokenizer)?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut weights = Vec::with_capacity(ck.params.num_values() * 4);
    let mut tensors = Vec::with_capacity(ck.params.len());
    for (name, t) in ck.params.iter() {
        let offset = weights.len() as u64;
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: weights.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        lineage: ck.lineage.clone(),
        tensors,
    };
    let wp = dir.join(WEIGHTS_FILE);
    fs::write(&wp, &weights).map_err(io(&wp))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io(&mp))?;
    tokenizer.save(dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let mp = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&mp).map_err(io(&mp))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    manifest.config.validate()?;
    let wp = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wp).map_err(io(&wp))?;
    let expected_len: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if bytes.len() as u64 != expected_len {
        return Err(ModelError::Corrupt(format!(
            "weights.bin has {} bytes, manifest describes {expected_len}",
            bytes.len()
        )));
    }

    let mut params = ParamStore::new();
    for (name, shape) in manifest.config.tensor_shapes() {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ModelError::Corrupt(format!("manifest lacks tensor {name}")))?;
        if entry.shape != shape {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(ModelError::Corrupt(format!("tensor {name} has dtype {}", entry.dtype)));
        }
        let n: usize = shape.iter().product();
        let (start, end) = (entry.offset as usize, (entry.offset + entry.length) as usize);
        if entry.length as usize != n * 4 || end > bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "tensor {name}: {} bytes at offset {} for {n} values",
                entry.length, entry.offset
            )));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)?;
        if !t.all_finite() {
            return Err(ModelError::Corrupt(format!("tensor {name} holds non-finite values")));
        }
        params.insert(name, t);
    }
    if manifest.tensors.len() != params.len() {
        return Err(ModelError::Corrupt(format!(
            "manifest lists {} tensors, config defines {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let checkpoint = Checkpoint {
        config: manifest.config,
        params,
        lineage: manifest.lineage,
    };
    let tokenizer = Tokenizer::load(dir)?;
    checkpoint.check_vocab(&tokenizer)?;
    Ok(LoadedCheckpoint { checkpoint, tokenizer })
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;
    use crate::tokenizer::{Vocabulary, SPECIAL_TOKENS};

    fn setup() -> (Checkpoint, Tokenizer) {
        let cfg = ModelConfig::new(20, 8, 1, 2);
        let ck = init_model(&cfg, 9).unwrap();
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0..15).map(|i| format!("w{i}")))
            .collect();
        let tok = Tokenizer::new(Vocabulary::new("v", tokens, None).unwrap(), false);
        (ck, tok)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ck, tok) = setup();
        let d1 = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, &tok, d1.path()).unwrap();
        let back = load_checkpoint(d1.path()).unwrap();
        assert_eq!(back.checkpoint, ck);
        assert_eq!(back.tokenizer, tok);
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(&back.checkpoint, &back.tokenizer, d2.path()).unwrap();
        for f in [MANIFEST_FILE, WEIGHTS_FILE, "vocab.txt", "tokenizer.json"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_weights_are_corrupt() {
        let (ck, tok) = setup();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, &tok, d.path()).unwrap();
        let wp = d.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&wp).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&wp, bytes).unwrap();
        assert!(matches!(load_checkpoint(d.path()), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn tampered_shape_names_the_tensor() {
        let (ck, tok) = setup();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, &tok, d.path()).unwrap();
        let mp = d.path().join(MANIFEST_FILE);
        let mut m: CheckpointManifest = serde_json::from_slice(&fs::read(&mp).unwrap()).unwrap();
        let e = m.tensors.iter_mut().find(|t| t.name == "pooler.weight").unwrap();
        e.shape = vec![4, 16];
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
        match load_checkpoint(d.path()) {
            Err(ModelError::ShapeMismatch { name, .. }) => assert_eq!(name, "pooler.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let (ck, tok) = setup();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, &tok, d.path()).unwrap();
        let mp = d.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&mp, text).unwrap();
        assert!(matches!(
            load_checkpoint(d.path()),
            Err(ModelError::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn vocab_size_must_match() {
        let (ck, tok) = setup();
        let small = tok.truncate(10).unwrap();
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_checkpoint(&ck, &small, d.path()),
            Err(ModelError::VocabMismatch { vocab: 10, model: 20 })
        ));
    }
}
