//! BERT-shaped encoder with a tied MLM head, a pooler, and task heads.

mod forward;
mod io;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{EngineError, ParamStore, Tensor};
use crate::rng::stream;
use crate::tokenizer::Tokenizer;

pub use forward::{
    encode_hidden, head_outputs, mlm_logits, mlm_logits_at, mlm_loss, pooled, task_loss, Batch, HeadTargets, Weights,
};
pub use io::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("vocab mismatch: tokenizer has {vocab} tokens, model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("layer {layer} out of range 0..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor {name}: shape {found:?} does not match config {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// L=2, H=64, A=2, I=256, P=128, V=2000.
    pub fn desk() -> Self {
        Self::new(2000, 64, 2, 2)
    }

    /// A config with I = 4H, P = 128 and BERT's dropout and epsilon.
    pub fn new(vocab_size: usize, hidden: usize, layers: usize, heads: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            layers,
            heads,
            intermediate: 4 * hidden,
            max_positions: 128,
            type_vocab: 2,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < crate::tokenizer::NUM_SPECIALS + 1 {
            return bad(format!("vocab_size {} leaves no room beyond the specials", self.vocab_size));
        }
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.intermediate == 0 {
            return bad("hidden, layers, heads and intermediate must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_positions < crate::tokenizer::MIN_MAX_LEN || self.type_vocab == 0 {
            return bad("max_positions must be at least 8 and type_vocab positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return bad(format!("layer_norm_eps {}", self.layer_norm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Every tensor name and shape, in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h, i, p, t) = (self.vocab_size, self.hidden, self.intermediate, self.max_positions, self.type_vocab);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("word_embeddings".into(), vec![v, h]),
            ("position_embeddings".into(), vec![p, h]),
            ("type_embeddings".into(), vec![t, h]),
            ("embedding_ln.gain".into(), vec![h]),
            ("embedding_ln.bias".into(), vec![h]),
        ];
        for l in 0..self.layers {
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("layer.{l}.attn.{proj}.weight"), vec![h, h]));
                out.push((format!("layer.{l}.attn.{proj}.bias"), vec![h]));
            }
            out.push((format!("layer.{l}.attn_ln.gain"), vec![h]));
            out.push((format!("layer.{l}.attn_ln.bias"), vec![h]));
            out.push((format!("layer.{l}.ffn.in.weight"), vec![h, i]));
            out.push((format!("layer.{l}.ffn.in.bias"), vec![i]));
            out.push((format!("layer.{l}.ffn.out.weight"), vec![i, h]));
            out.push((format!("layer.{l}.ffn.out.bias"), vec![h]));
            out.push((format!("layer.{l}.ffn_ln.gain"), vec![h]));
            out.push((format!("layer.{l}.ffn_ln.bias"), vec![h]));
        }
        out.extend([
            ("mlm.transform.weight".into(), vec![h, h]),
            ("mlm.transform.bias".into(), vec![h]),
            ("mlm.ln.gain".into(), vec![h]),
            ("mlm.ln.bias".into(), vec![h]),
            ("mlm.output_bias".into(), vec![v]),
            ("pooler.weight".into(), vec![h, h]),
            ("pooler.bias".into(), vec![h]),
        ]);
        out
    }
}

/// How a tensor is initialized (and whether weight decay applies).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gain,
}

pub fn param_role(name: &str) -> ParamRole {
    if name.ends_with(".gain") {
        ParamRole::Gain
    } else if name.ends_with("bias") {
        ParamRole::Bias
    } else {
        ParamRole::Weight
    }
}

fn init_store(shapes: &[(String, Vec<usize>)], seed: u64, purpose: &str) -> ParamStore<f32> {
    let mut rng = stream(seed, purpose, 0);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = match param_role(name) {
            ParamRole::Weight => Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32),
            ParamRole::Bias => Tensor::zeros(shape),
            ParamRole::Gain => Tensor::full(shape, 1.0),
        };
        store.insert(name.clone(), t);
    }
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub lineage: Vec<String>,
}

impl Checkpoint {
    pub fn word_embeddings(&self) -> &Tensor<f32> {
        self.params.get("word_embeddings").expect("checkpoint has word_embeddings")
    }

    pub fn check_vocab(&self, tokenizer: &Tokenizer) -> Result<(), ModelError> {
        if tokenizer.len() != self.config.vocab_size {
            return Err(ModelError::VocabMismatch {
                vocab: tokenizer.len(),
                model: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// SHA-256 over config, lineage and every tensor's bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for l in &self.lineage {
            h.update(l.as_bytes());
            h.update([0]);
        }
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }
}

/// Normal(0, 0.02) weights, zero biases, unit gains; a pure function of
/// `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    Ok(Checkpoint {
        config: config.clone(),
        params: init_store(&config.tensor_shapes(), seed, "init"),
        lineage: vec![format!("init:seed={seed}")],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification(usize),
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification(n) => n,
            HeadKind::Regression => 1,
        }
    }
}

/// An affine map from the pooled CLS state to logits or a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub params: ParamStore<f32>,
    pub seed: u64,
}

impl TaskHead {
    pub fn init(kind: HeadKind, hidden: usize, seed: u64) -> Self {
        let shapes = vec![
            ("head.weight".to_string(), vec![hidden, kind.outputs()]),
            ("head.bias".to_string(), vec![kind.outputs()]),
        ];
        Self {
            kind,
            params: init_store(&shapes, seed, "head"),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(50, 16, 2, 2)
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = init_model(&tiny(), 3).unwrap();
        let b = init_model(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = init_model(&tiny(), 4).unwrap();
        assert_ne!(a.word_embeddings(), c.word_embeddings());
    }

    #[test]
    fn init_statistics() {
        let ck = init_model(&ModelConfig::new(50, 64, 1, 2), 1).unwrap();
        let w = ck.params.get("layer.0.attn.query.weight").unwrap();
        assert_eq!(w.shape(), &[64, 64]);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let sd = (w.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.02).abs() < 0.004, "{sd}");
        assert!(ck.params.get("layer.0.attn.query.bias").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(ck.params.get("mlm.ln.gain").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(ck.params.get("mlm.output_bias").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn no_separate_decoder_tensor() {
        let ck = init_model(&tiny(), 0).unwrap();
        let v = ck.config.vocab_size;
        let h = ck.config.hidden;
        let vocab_shaped: Vec<&str> = ck
            .params
            .iter()
            .filter(|(_, t)| t.shape() == [v, h] || t.shape() == [h, v])
            .map(|(n, _)| n)
            .collect();
        assert_eq!(vocab_shaped, ["word_embeddings"]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(init_model(&c, 0), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_roles() {
        assert_eq!(param_role("mlm.output_bias"), ParamRole::Bias);
        assert_eq!(param_role("layer.0.attn_ln.gain"), ParamRole::Gain);
        assert_eq!(param_role("word_embeddings"), ParamRole::Weight);
        assert_eq!(param_role("layer.1.ffn.in.bias"), ParamRole::Bias);
    }
}
