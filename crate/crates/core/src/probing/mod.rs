//! Structural probe (distance probe, MST, UUAS, DSpr) and the WiC probe.

mod structural;
mod tree;

use crate::corpus::{LabelSpace, TaskDataset, TaskKind, Treebank};
use crate::engine::{EngineError, Tensor};
use crate::model::{encode_hidden, Batch, Checkpoint, ModelError};
use crate::tokenizer::{Encoding, Tokenizer};
use crate::training::{multi_seed_finetune, MultiSeedResult, TrainConfig, TrainError};

pub use structural::{
    dspr, eval_dspr, eval_uuas, probe_distances, probe_structural, train_structural_probe, uuas, DsprReport,
    ProbeConfig, ProbeParams, StructuralProbeReport, UuasReport,
};
pub use tree::{gold_edges, mst_from_distances, tree_distances, DistanceMatrix};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("empty treebank")]
    EmptyTreebank,
    #[error("vector dimension {found} does not match probe input {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("sentence {index}: {vectors} word vectors for {words} words")]
    Misaligned { index: usize, vectors: usize, words: usize },
    #[error("sentence {index} does not fit in {max} positions")]
    TooLong { index: usize, max: usize },
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("WiC dataset {0:?} must be binary pair classification")]
    NotBinary(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One `[n, H]` matrix per sentence: a vector per treebank word.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub sentences: Vec<Tensor<f64>>,
}

impl WordVectors {
    pub fn dim(&self) -> Option<usize> {
        self.sentences.first().map(|t| t.last_dim())
    }

    pub fn check_aligned(&self, treebank: &Treebank) -> Result<(), ProbeError> {
        if self.sentences.len() != treebank.len() {
            return Err(ProbeError::Misaligned {
                index: self.sentences.len().min(treebank.len()),
                vectors: self.sentences.len(),
                words: treebank.len(),
            });
        }
        for (index, (v, s)) in self.sentences.iter().zip(&treebank.sentences).enumerate() {
            if v.rows() != s.len() {
                return Err(ProbeError::Misaligned {
                    index,
                    vectors: v.rows(),
                    words: s.len(),
                });
            }
        }
        Ok(())
    }
}

/// The middle layer, rounded up.
pub fn default_layer(layers: usize) -> usize {
    layers.div_ceil(2)
}

/// Default probe rank: `min(128, H)`.
pub fn default_rank(hidden: usize) -> usize {
    hidden.min(128)
}

const EXTRACT_BATCH: usize = 32;

/// Hidden states at `layer`, mean-pooled over each word's subword span.
pub fn extract_word_vectors(
    ck: &Checkpoint,
    tokenizer: &Tokenizer,
    treebank: &Treebank,
    layer: usize,
) -> Result<WordVectors, ProbeError> {
    if layer > ck.config.layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            layers: ck.config.layers,
        }
        .into());
    }
    let max = ck.config.max_positions;
    let mut encs = Vec::with_capacity(treebank.len());
    for (index, s) in treebank.sentences.iter().enumerate() {
        let e = tokenizer.encode_pretokenized(&s.tokens, max)?;
        if e.word_spans.len() != s.len() {
            return Err(ProbeError::TooLong { index, max });
        }
        encs.push(e);
    }
    let h = ck.config.hidden;
    let mut sentences = Vec::with_capacity(encs.len());
    for chunk in encs.chunks(EXTRACT_BATCH) {
        let refs: Vec<&Encoding> = chunk.iter().collect();
        let batch = Batch::from_encodings(&refs);
        let states = encode_hidden(ck, &batch, layer)?;
        for (b, e) in chunk.iter().enumerate() {
            let mut out = Vec::with_capacity(e.word_spans.len() * h);
            for &(start, end) in &e.word_spans {
                let mut v = vec![0.0f64; h];
                for pos in start..end {
                    let row = &states.data()[(b * batch.seq + pos) * h..][..h];
                    for (acc, &x) in v.iter_mut().zip(row) {
                        *acc += x as f64;
                    }
                }
                let k = (end - start) as f64;
                out.extend(v.into_iter().map(|x| x / k));
            }
            sentences.push(Tensor::new(vec![e.word_spans.len(), h], out)?);
        }
    }
    Ok(WordVectors { sentences })
}

/// Pair fine-tuning on a binary WiC-style dataset, one run per seed.
pub fn wic_probe(
    ck: &Checkpoint,
    tokenizer: &Tokenizer,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiSeedResult, ProbeError> {
    let binary = matches!(&dataset.label_space, LabelSpace::Classes(c) if c.len() == 2);
    if dataset.kind != TaskKind::PairClassification || !binary {
        return Err(ProbeError::NotBinary(dataset.name.clone()));
    }
    Ok(multi_seed_finetune(ck, tokenizer, dataset, cfg, seeds, true)?)
}
