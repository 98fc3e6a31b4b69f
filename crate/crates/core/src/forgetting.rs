//! Source-side evaluation after transfer: source-task fine-tuning scores
//! and masked-LM perplexity on the source corpus.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TaskDataset};
use crate::metrics::{average_difference_report, Aggregate, Deviation, GroupScore, MetricKind, MetricsError};
use crate::model::{mlm_logits_at, Checkpoint, ModelError};
use crate::rng::stream;
use crate::tokenizer::Tokenizer;
use crate::training::{mask_batch, multi_seed_finetune, pack_sentences, MaskingPolicy, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ForgettingError {
    #[error("model {model:?} was swapped to vocabulary {lineage:?} but is paired with tokenizer {tokenizer:?}")]
    TokenizerLineage {
        model: String,
        lineage: String,
        tokenizer: String,
    },
    #[error("tasks {0:?} and {1:?} differ in kind or metric")]
    TaskShape(String, String),
    #[error("roster models differ in config shape")]
    RosterShape,
    #[error("corpus {0:?} produced no masked position")]
    NothingMasked(String),
    #[error("{task} on {model}: {source}")]
    Run {
        model: String,
        task: String,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Sequences per forward pass when scoring perplexity.
const PPL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_cross_entropy: f64,
    pub positions: usize,
    pub mask_seed: u64,
}

/// `exp(mean masked cross-entropy)` under one fixed, seeded masking pass
/// over the packed corpus.
pub fn mlm_perplexity(
    ck: &Checkpoint,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    mask_seed: u64,
    max_seq_len: usize,
) -> Result<Perplexity, ForgettingError> {
    ck.check_vocab(tokenizer)?;
    let packed = pack_sentences(corpus, tokenizer, max_seq_len.min(ck.config.max_positions))?;
    let policy = MaskingPolicy::default();
    let (mut total, mut count) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..packed.len()).collect();
    for (b, chunk) in idx.chunks(PPL_BATCH).enumerate() {
        let batch = packed.batch(chunk);
        let m = mask_batch(&batch, ck.config.vocab_size, &policy, &mut stream(mask_seed, "perplexity-mask", b as u64));
        if m.positions.is_empty() {
            continue;
        }
        let logits = mlm_logits_at(ck, &m.batch, &m.positions)?;
        for (r, &t) in m.targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ForgettingError::NothingMasked(corpus.name.clone()));
    }
    let mean = total / count as f64;
    Ok(Perplexity {
        // cross-entropy is non-negative, so this never drops below 1
        perplexity: mean.max(0.0).exp(),
        mean_cross_entropy: mean,
        positions: count,
        mask_seed,
    })
}

/// A model together with the tokenizer it is evaluated under.
#[derive(Clone, Debug)]
pub struct RosterEntry {
    pub name: String,
    pub checkpoint: Checkpoint,
    pub tokenizer: Tokenizer,
}

#[derive(Clone, Debug)]
pub struct BidirectionalEvalPlan {
    /// Deviations are grouped under this label (the source language).
    pub group: String,
    pub source_task: TaskDataset,
    pub target_task: TaskDataset,
    /// Typically `[src]`, SWAP, KEEP.
    pub roster: Vec<RosterEntry>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTaskScore {
    pub model: String,
    pub task: String,
    pub metric: MetricKind,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalReport {
    pub scores: Vec<ModelTaskScore>,
    /// Each model's mean score minus its (task, group) mean.
    pub deviations: Vec<Deviation>,
}

/// A swapped model must be evaluated under the vocabulary it was swapped to.
pub fn check_pairing(entry: &RosterEntry) -> Result<(), ForgettingError> {
    entry.checkpoint.check_vocab(&entry.tokenizer)?;
    if let Some(v) = entry.checkpoint.lineage.iter().rev().find_map(|l| l.strip_prefix("swap:")) {
        if v != entry.tokenizer.name() {
            return Err(ForgettingError::TokenizerLineage {
                model: entry.name.clone(),
                lineage: v.to_string(),
                tokenizer: entry.tokenizer.name().to_string(),
            });
        }
    }
    Ok(())
}

/// Fine-tunes every roster model on both tasks (multi-seed) and reports
/// raw scores plus deviations from the per-task roster mean.
pub fn eval_bidirectional(plan: &BidirectionalEvalPlan) -> Result<BidirectionalReport, ForgettingError> {
    let (s, t) = (&plan.source_task, &plan.target_task);
    if s.kind != t.kind || s.metric != t.metric {
        return Err(ForgettingError::TaskShape(s.name.clone(), t.name.clone()));
    }
    if let Some(first) = plan.roster.first() {
        let shape = |c: &Checkpoint| (c.config.hidden, c.config.layers, c.config.heads, c.config.intermediate);
        if plan.roster.iter().any(|e| shape(&e.checkpoint) != shape(&first.checkpoint)) {
            return Err(ForgettingError::RosterShape);
        }
    }
    for e in &plan.roster {
        check_pairing(e)?;
    }
    let mut scores = Vec::new();
    for task in [s, t] {
        for e in &plan.roster {
            let r = multi_seed_finetune(&e.checkpoint, &e.tokenizer, task, &plan.train, &plan.seeds, true).map_err(
                |source| ForgettingError::Run {
                    model: e.name.clone(),
                    task: task.name.clone(),
                    source,
                },
            )?;
            scores.push(ModelTaskScore {
                model: e.name.clone(),
                task: task.name.clone(),
                metric: r.metric,
                aggregate: r.aggregate,
            });
        }
    }
    let group: Vec<GroupScore> = scores
        .iter()
        .map(|m| GroupScore {
            task: m.task.clone(),
            group: plan.group.clone(),
            model: m.model.clone(),
            score: m.aggregate.mean,
        })
        .collect();
    Ok(BidirectionalReport {
        deviations: average_difference_report(&group)?,
        scores,
    })
}
