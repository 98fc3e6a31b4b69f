use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossPoint, RunResult, StepRunner, TrainConfig, TrainError};
use crate::corpus::{Label, LabelSpace, TaskDataset, TaskExample};
use crate::engine::ParamStore;
use crate::metrics::{aggregate, compute_metric, gender_parity, Aggregate, MetricKind, Outputs, Score};
use crate::model::{head_outputs, task_loss, Batch, Checkpoint, HeadKind, HeadTargets, TaskHead};
use crate::rng::stream;
use crate::tokenizer::{Encoding, Tokenizer};

const EVAL_BATCH: usize = 64;

fn head_kind(task: &TaskDataset) -> HeadKind {
    if task.kind.is_regression() {
        HeadKind::Regression
    } else {
        HeadKind::Classification(task.num_classes())
    }
}

struct Prepared {
    encodings: Vec<Encoding>,
    classes: Vec<usize>,
    /// Regression labels scaled to [0, 1].
    scaled: Vec<f64>,
}

fn prepare(task: &TaskDataset, tokenizer: &Tokenizer, examples: &[&TaskExample], max_len: usize) -> Result<Prepared, TrainError> {
    let mut p = Prepared {
        encodings: Vec::with_capacity(examples.len()),
        classes: Vec::new(),
        scaled: Vec::new(),
    };
    for ex in examples {
        p.encodings.push(tokenizer.encode(&ex.text_a, ex.text_b.as_deref(), max_len)?);
        match (&task.label_space, &ex.label) {
            (LabelSpace::Range { min, max }, Label::Value(v)) => p.scaled.push((v - min) / (max - min)),
            (LabelSpace::Classes(_), l) => p.classes.push(
                task.class_index(l)
                    .ok_or_else(|| TrainError::LabelSpace(format!("{}: label {l:?} not in label space", task.name)))?,
            ),
            (space, l) => return Err(TrainError::LabelSpace(format!("{}: label {l:?} against {space:?}", task.name))),
        }
    }
    Ok(p)
}

/// Model outputs on one split and the metrics they score.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    /// Predicted class ids (classification).
    pub classes: Vec<usize>,
    /// Predictions rescaled to the label range (regression).
    pub values: Vec<f64>,
    pub scores: BTreeMap<MetricKind, Score>,
}

/// Scores `head` on the task's dev split.
pub fn evaluate(
    ck: &Checkpoint,
    head: &TaskHead,
    tokenizer: &Tokenizer,
    task: &TaskDataset,
    max_len: usize,
) -> Result<EvalOutput, TrainError> {
    let dev = task.dev();
    if dev.is_empty() {
        return Err(TrainError::EmptySplit(task.name.clone(), "dev"));
    }
    let prep = prepare(task, tokenizer, &dev, max_len)?;
    let mut classes = Vec::new();
    let mut values = Vec::new();
    for chunk in prep.encodings.chunks(EVAL_BATCH) {
        let refs: Vec<&Encoding> = chunk.iter().collect();
        let out = head_outputs(ck, head, &Batch::from_encodings(&refs))?;
        for r in 0..out.rows() {
            let row = out.row(r);
            match (head.kind, &task.label_space) {
                (HeadKind::Regression, LabelSpace::Range { min, max }) => values.push(min + row[0] as f64 * (max - min)),
                _ => classes.push(argmax(row)),
            }
        }
    }
    let mut scores = BTreeMap::new();
    if task.kind.is_regression() {
        let golds: Vec<f64> = prep.scaled.iter().map(|s| match task.label_space {
            LabelSpace::Range { min, max } => min + s * (max - min),
            LabelSpace::Classes(_) => unreachable!("regression task with class labels"),
        }).collect();
        for kind in [MetricKind::Pearson, MetricKind::Spearman] {
            scores.insert(kind, compute_metric(kind, Outputs::Values(&values), Outputs::Values(&golds))?);
        }
    } else if task.metric == MetricKind::GenderParity {
        let ids: Vec<String> = dev.iter().map(|e| e.pair_id.clone().unwrap_or_default()).collect();
        let gp = gender_parity(&classes, &prep.classes, &ids)?;
        scores.insert(MetricKind::GenderParity, Score::Defined(gp.gps / 100.0));
        scores.insert(MetricKind::Accuracy, Score::Defined(gp.accuracy / 100.0));
    } else {
        for kind in [task.metric, MetricKind::Accuracy] {
            scores.insert(kind, compute_metric(kind, Outputs::Classes(&classes), Outputs::Classes(&prep.classes))?);
        }
    }
    Ok(EvalOutput { classes, values, scores })
}

/// Lowest index among the maxima.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fine-tunes the whole encoder plus a fresh head on the train split and
/// scores the dev split. All randomness is keyed by `seed`; `cfg.seed` is
/// not consulted.
pub fn finetune(
    ck: &Checkpoint,
    tokenizer: &Tokenizer,
    task: &TaskDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunResult, TrainError> {
    cfg.validate()?;
    ck.check_vocab(tokenizer)?;
    let train = task.train();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(task.name.clone(), "train"));
    }
    let max_len = cfg.max_seq_len.min(ck.config.max_positions);
    let prep = prepare(task, tokenizer, &train, max_len)?;
    let kind = head_kind(task);
    let head = TaskHead::init(kind, ck.config.hidden, seed);

    let mut params = ck.params.clone();
    for (name, t) in head.params.iter() {
        params.insert(name, t.clone());
    }
    let mut runner = StepRunner::new(params, cfg.optimizer);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.total_steps(per_epoch);
    let schedule = cfg.schedule(total);
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0.. {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "finetune-order", epoch));
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let refs: Vec<&Encoding> = chunk.iter().map(|&i| &prep.encodings[i]).collect();
            let batch = Batch::from_encodings(&refs);
            let classes: Vec<usize>;
            let values: Vec<f64>;
            let targets = if kind == HeadKind::Regression {
                values = chunk.iter().map(|&i| prep.scaled[i]).collect();
                HeadTargets::Values(&values)
            } else {
                classes = chunk.iter().map(|&i| prep.classes[i]).collect();
                HeadTargets::Classes(&classes)
            };
            let mut rng = stream(seed, "finetune-dropout", step as u64);
            let model_cfg = &ck.config;
            let loss = runner.step(schedule.lr_at(step), step, |g, w| {
                Ok(task_loss(g, w, model_cfg, &batch, targets, Some(&mut rng))?.0)
            })?;
            curve.push(LossPoint { step, loss });
            step += 1;
        }
    }

    let mut body = ParamStore::new();
    let mut head_params = ParamStore::new();
    for (name, t) in runner.params.iter() {
        if name.starts_with("head.") {
            head_params.insert(name, t.clone());
        } else {
            body.insert(name, t.clone());
        }
    }
    let mut lineage = ck.lineage.clone();
    lineage.push(format!("finetune:{}:seed={seed}", task.name));
    let checkpoint = Checkpoint {
        config: ck.config.clone(),
        params: body,
        lineage,
    };
    let head = TaskHead {
        kind,
        params: head_params,
        seed,
    };
    let eval = evaluate(&checkpoint, &head, tokenizer, task, max_len)?;
    Ok(RunResult {
        checkpoint,
        head: Some(head),
        loss_curve: curve,
        dev: eval.scores,
        metric: Some(task.metric),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub scores: BTreeMap<MetricKind, Score>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedResult {
    pub task: String,
    pub metric: MetricKind,
    pub per_seed: Vec<SeedScores>,
    /// Over the declared metric; an undefined score enters as 0.
    pub aggregate: Aggregate,
}

impl MultiSeedResult {
    /// Aggregate of any recorded metric, undefined scores entering as 0.
    pub fn aggregate_of(&self, kind: MetricKind) -> Option<Aggregate> {
        let vals: Option<Vec<f64>> = self
            .per_seed
            .iter()
            .map(|s| s.scores.get(&kind).map(|v| v.value().unwrap_or(0.0)))
            .collect();
        aggregate(&vals?).ok()
    }

    pub fn undefined_seeds(&self) -> Vec<u64> {
        self.per_seed
            .iter()
            .filter(|s| s.scores.get(&self.metric) == Some(&Score::Undefined))
            .map(|s| s.seed)
            .collect()
    }
}

/// Runs [`finetune`] once per seed and aggregates the dev scores. With
/// `parallel` the seeds run on the rayon pool; the result is identical
/// either way.
pub fn multi_seed_finetune(
    ck: &Checkpoint,
    tokenizer: &Tokenizer,
    task: &TaskDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    parallel: bool,
) -> Result<MultiSeedResult, TrainError> {
    if seeds.len() < 2 {
        return Err(TrainError::InvalidConfig(format!("multi-seed fine-tuning needs at least 2 seeds, got {}", seeds.len())));
    }
    let run = |&seed: &u64| {
        finetune(ck, tokenizer, task, cfg, seed)
            .map(|r| SeedScores { seed, scores: r.dev })
            .map_err(|e| TrainError::Seed {
                seed,
                source: Box::new(e),
            })
    };
    let results: Vec<Result<SeedScores, TrainError>> = if parallel {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    };
    let per_seed = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut out = MultiSeedResult {
        task: task.name.clone(),
        metric: task.metric,
        per_seed,
        aggregate: Aggregate {
            mean: 0.0,
            stdev: None,
            values: Vec::new(),
        },
    };
    out.aggregate = out
        .aggregate_of(task.metric)
        .ok_or_else(|| TrainError::LabelSpace(format!("{}: metric {} missing from dev scores", task.name, task.metric)))?;
    Ok(out)
}
