//! Masking, AdamW, MLM pre-training, and task fine-tuning.

mod finetune;
mod masking;
mod optim;
mod pretrain;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Graph, ParamStore, Tensor, Var};
use crate::metrics::{MetricKind, MetricsError, Score};
use crate::model::{Checkpoint, ModelError, TaskHead, Weights};

pub use finetune::{evaluate, finetune, multi_seed_finetune, EvalOutput, MultiSeedResult, SeedScores};
pub use masking::{mask_batch, Corruption, MaskedBatch, MaskingPolicy};
pub use optim::{decays, AdamW, AdamWConfig, LinearSchedule};
pub use pretrain::{pack_sentences, pretrain, MlmTrainer, PackedSequences};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus {0:?} yields no trainable sequence")]
    EmptyCorpus(String),
    #[error("task {0:?} has an empty {1} split")]
    EmptySplit(String, &'static str),
    #[error("non-finite gradient for {tensor} at step {step}")]
    NonFiniteGradient { step: usize, tensor: String },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("label space mismatch: {0}")]
    LabelSpace(String),
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_seq_len: usize,
    pub epochs: usize,
    /// Caps the step count derived from `epochs`.
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub masking: MaskingPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl TrainConfig {
    /// Batch 128, lr 5e-5, 128 positions, one epoch.
    pub fn pretraining() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 5e-5,
            max_seq_len: 128,
            epochs: 1,
            max_steps: None,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            masking: MaskingPolicy::default(),
            seed: 0,
        }
    }

    /// Batch 32, lr 2e-5, 128 positions, three epochs.
    pub fn finetuning() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-5,
            epochs: 3,
            ..Self::pretraining()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if self.max_seq_len < crate::tokenizer::MIN_MAX_LEN {
            return bad(format!("max_seq_len {} below 8", self.max_seq_len));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad(format!("optimizer {o:?}"));
        }
        self.masking.validate()
    }

    /// Steps for `per_epoch` batches per epoch, honoring `max_steps`.
    pub fn total_steps(&self, per_epoch: usize) -> usize {
        let n = self.epochs.saturating_mul(per_epoch);
        self.max_steps.map_or(n, |m| m.min(n))
    }

    pub fn schedule(&self, total_steps: usize) -> LinearSchedule {
        LinearSchedule {
            base_lr: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Outcome of one pre-training or fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub checkpoint: Checkpoint,
    pub head: Option<TaskHead>,
    pub loss_curve: Vec<LossPoint>,
    /// Dev scores; the task's declared metric plus companions (accuracy
    /// next to gender parity, Pearson next to Spearman).
    pub dev: BTreeMap<MetricKind, Score>,
    pub metric: Option<MetricKind>,
    pub seed: u64,
}

impl RunResult {
    pub fn score(&self) -> Option<Score> {
        self.metric.and_then(|m| self.dev.get(&m).copied())
    }
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss\n");
    for p in curve {
        writeln!(s, "{},{}", p.step, p.loss).expect("string write");
    }
    s
}

pub fn write_loss_curve(curve: &[LossPoint], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, loss_curve_csv(curve)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Owns the trainable tensors and optimizer state of one run.
pub(crate) struct StepRunner {
    pub params: ParamStore<f32>,
    opt: AdamW<f32>,
}

impl StepRunner {
    pub fn new(params: ParamStore<f32>, cfg: AdamWConfig) -> Self {
        let opt = AdamW::new(cfg, &params);
        Self { params, opt }
    }

    /// Builds the loss, backpropagates, and applies one AdamW update.
    pub fn step(
        &mut self,
        lr: f64,
        step: usize,
        loss_fn: impl FnOnce(&mut Graph<f32>, &Weights) -> Result<Var, ModelError>,
    ) -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let mut w = Weights::default();
        w.bind(&mut g, &self.params);
        let loss = loss_fn(&mut g, &w)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        let mut grads = g.backward(loss)?;
        let gs: Vec<Option<Tensor<f32>>> = w.vars().iter().map(|(_, v)| grads.take(*v)).collect();
        self.opt.step(&mut self.params, &gs, lr, step)?;
        Ok(value)
    }
}
