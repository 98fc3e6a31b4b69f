use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{gold_edges, mst_from_distances, tree_distances, DistanceMatrix};
use super::{default_layer, default_rank, extract_word_vectors, ProbeError, WordVectors};
use crate::corpus::{ParsedSentence, Treebank};
use crate::engine::{Graph, ParamStore, Tensor};
use crate::metrics::{spearman, Score};
use crate::model::Checkpoint;
use crate::rng::stream;
use crate::tokenizer::Tokenizer;
use crate::training::{AdamW, AdamWConfig, LossPoint};

const DSPR_LENGTHS: std::ops::RangeInclusive<usize> = 5..=50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Defaults to `min(128, H)`.
    pub rank: Option<usize>,
    /// Defaults to the middle layer.
    pub layer: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    /// Sentences per step.
    pub batch_sentences: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            rank: None,
            layer: None,
            steps: 2000,
            learning_rate: 1e-3,
            batch_sentences: 20,
            seed: 0,
        }
    }
}

/// The `[k, H]` map under which squared distances approximate tree
/// distances.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub b: Tensor<f64>,
    pub layer: usize,
    /// Fingerprint of the checkpoint the vectors came from.
    pub checkpoint: String,
    pub loss_curve: Vec<LossPoint>,
}

impl ProbeParams {
    /// Normal(0, 0.02) entries divided by `sqrt(rank)`.
    pub fn init(rank: usize, hidden: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut rng = stream(seed, "probe-init", 0);
        let scale = 1.0 / (rank as f64).sqrt();
        Self {
            b: Tensor::from_fn(&[rank, hidden], |_| normal.sample(&mut rng) * scale),
            layer: 0,
            checkpoint: String::new(),
            loss_curve: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.b.shape()[1]
    }

    /// The same probe with `B` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut p = self.clone();
        for v in p.b.data_mut() {
            *v *= c;
        }
        p
    }
}

/// `d_B(i, j) = |B (h_i - h_j)|^2`.
pub fn probe_distances(probe: &ProbeParams, vectors: &Tensor<f64>) -> Result<DistanceMatrix, ProbeError> {
    let (n, h) = (vectors.rows(), vectors.last_dim());
    if h != probe.hidden() {
        return Err(ProbeError::DimMismatch {
            expected: probe.hidden(),
            found: h,
        });
    }
    let k = probe.rank();
    let mut t = vec![0.0f64; n * k];
    for i in 0..n {
        let x = vectors.row(i);
        for r in 0..k {
            t[i * k + r] = probe.b.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    let mut d = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = (0..k).map(|r| (t[i * k + r] - t[j * k + r]).powi(2)).sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// Fits `B` by Adam on the mean over sentences of
/// `(1/n^2) sum_ij |d_T(i,j) - d_B(i,j)|`, for a fixed number of steps.
pub fn train_structural_probe(
    vectors: &WordVectors,
    treebank: &Treebank,
    cfg: &ProbeConfig,
) -> Result<ProbeParams, ProbeError> {
    if treebank.is_empty() {
        return Err(ProbeError::EmptyTreebank);
    }
    vectors.check_aligned(treebank)?;
    let hidden = vectors.dim().expect("non-empty");
    let rank = cfg.rank.unwrap_or(default_rank(hidden));
    if rank == 0 || rank > hidden {
        return Err(ProbeError::InvalidConfig(format!("rank {rank} outside 1..={hidden}")));
    }
    if cfg.batch_sentences == 0 || !(cfg.learning_rate > 0.0) {
        return Err(ProbeError::InvalidConfig(format!("{cfg:?}")));
    }
    let golds: Vec<Tensor<f64>> = treebank
        .sentences
        .iter()
        .map(|s| {
            let d = tree_distances(s);
            Tensor::new(vec![d.n, d.n], d.data).expect("square")
        })
        .collect();

    let mut probe = ProbeParams::init(rank, hidden, cfg.seed);
    let mut store = ParamStore::new();
    store.insert("probe.b", probe.b.clone());
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam, &store);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_sentences);
        while batch.len() < cfg.batch_sentences.min(treebank.len()) {
            if cursor == order.len() {
                order = (0..treebank.len()).collect();
                order.shuffle(&mut stream(cfg.seed, "probe-order", epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let b = g.param(store.tensor_at(0).clone());
        let mut total = None;
        for &s in &batch {
            let n = golds[s].rows();
            let x = g.constant(vectors.sentences[s].clone());
            let t = g.matmul_t(x, b, false, true)?;
            let d = g.pairwise_sq_dist(t)?;
            let gold = g.constant(golds[s].clone());
            let diff = g.sub(d, gold)?;
            let a = g.abs(diff)?;
            let sum = g.sum(a)?;
            let l = g.scale(sum, 1.0 / (n * n) as f64)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        probe.loss_curve.push(LossPoint {
            step,
            loss: g.value(loss).item(),
        });
        let mut grads = g.backward(loss)?;
        opt.step(&mut store, &[grads.take(b)], cfg.learning_rate, step)?;
    }
    probe.b = store.tensor_at(0).clone();
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UuasReport {
    /// Undefined when no gold edge survives punctuation filtering.
    pub score: Score,
    pub correct: usize,
    pub total: usize,
    /// Sentences with fewer than two non-punctuation words.
    pub skipped: usize,
}

/// Fraction of gold edges between non-punctuation words that the MST over
/// the predicted distances (restricted to those words) recovers.
pub fn uuas(treebank: &Treebank, predicted: &[DistanceMatrix]) -> UuasReport {
    let per: Vec<Option<(usize, usize)>> = treebank
        .sentences
        .par_iter()
        .zip(predicted.par_iter())
        .map(|(s, d)| sentence_uuas(s, d))
        .collect();
    let (mut correct, mut total, mut skipped) = (0, 0, 0);
    for p in per {
        match p {
            Some((c, t)) => {
                correct += c;
                total += t;
            }
            None => skipped += 1,
        }
    }
    UuasReport {
        score: if total == 0 {
            Score::Undefined
        } else {
            Score::Defined(correct as f64 / total as f64)
        },
        correct,
        total,
        skipped,
    }
}

fn sentence_uuas(s: &ParsedSentence, d: &DistanceMatrix) -> Option<(usize, usize)> {
    let keep: Vec<usize> = (0..s.len()).filter(|&i| !s.is_punct(i)).collect();
    if keep.len() < 2 {
        return None;
    }
    let gold: Vec<(usize, usize)> = gold_edges(s)
        .into_iter()
        .filter(|&(a, b)| !s.is_punct(a) && !s.is_punct(b))
        .collect();
    let pred: Vec<(usize, usize)> = mst_from_distances(&d.restrict(&keep))
        .into_iter()
        .map(|(a, b)| (keep[a], keep[b]))
        .collect();
    Some((gold.iter().filter(|e| pred.contains(e)).count(), gold.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub sentences: usize,
    pub mean_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsprReport {
    /// Undefined when no sentence has 5 to 50 words.
    pub score: Score,
    pub per_length: BTreeMap<usize, LengthBucket>,
}

/// Spearman between predicted and gold pair distances per sentence,
/// averaged within each length from 5 to 50 and then across lengths. A
/// sentence whose correlation is undefined (constant predictions) counts
/// as 0.
pub fn dspr(treebank: &Treebank, predicted: &[DistanceMatrix]) -> DsprReport {
    let per: Vec<Option<(usize, f64)>> = treebank
        .sentences
        .par_iter()
        .zip(predicted.par_iter())
        .map(|(s, d)| {
            DSPR_LENGTHS.contains(&s.len()).then(|| {
                let gold = tree_distances(s).upper_triangle();
                let r = spearman(&d.upper_triangle(), &gold).value().unwrap_or(0.0);
                (s.len(), r)
            })
        })
        .collect();
    let mut sums: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (len, r) in per.into_iter().flatten() {
        let e = sums.entry(len).or_default();
        e.0 += 1;
        e.1 += r;
    }
    let per_length: BTreeMap<usize, LengthBucket> = sums
        .into_iter()
        .map(|(len, (n, s))| {
            (
                len,
                LengthBucket {
                    sentences: n,
                    mean_spearman: s / n as f64,
                },
            )
        })
        .collect();
    let score = if per_length.is_empty() {
        Score::Undefined
    } else {
        Score::Defined(per_length.values().map(|b| b.mean_spearman).sum::<f64>() / per_length.len() as f64)
    };
    DsprReport { score, per_length }
}

fn predict(probe: &ProbeParams, vectors: &WordVectors, treebank: &Treebank) -> Result<Vec<DistanceMatrix>, ProbeError> {
    vectors.check_aligned(treebank)?;
    vectors.sentences.par_iter().map(|v| probe_distances(probe, v)).collect()
}

pub fn eval_uuas(probe: &ProbeParams, vectors: &WordVectors, treebank: &Treebank) -> Result<UuasReport, ProbeError> {
    Ok(uuas(treebank, &predict(probe, vectors, treebank)?))
}

pub fn eval_dspr(probe: &ProbeParams, vectors: &WordVectors, treebank: &Treebank) -> Result<DsprReport, ProbeError> {
    Ok(dspr(treebank, &predict(probe, vectors, treebank)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralProbeReport {
    pub layer: usize,
    pub rank: usize,
    pub train_sentences: usize,
    pub eval_sentences: usize,
    pub uuas: UuasReport,
    pub dspr: DsprReport,
}

/// Extracts vectors, trains on the first 80% of the treebank and scores
/// the remaining 20% (the whole treebank when it has under 5 sentences).
pub fn probe_structural(
    ck: &Checkpoint,
    tokenizer: &Tokenizer,
    treebank: &Treebank,
    cfg: &ProbeConfig,
) -> Result<StructuralProbeReport, ProbeError> {
    if treebank.is_empty() {
        return Err(ProbeError::EmptyTreebank);
    }
    let layer = cfg.layer.unwrap_or(default_layer(ck.config.layers));
    let vectors = extract_word_vectors(ck, tokenizer, treebank, layer)?;
    let cut = if treebank.len() < 5 {
        treebank.len()
    } else {
        treebank.len() * 4 / 5
    };
    let split = |r: std::ops::Range<usize>| {
        (
            WordVectors {
                sentences: vectors.sentences[r.clone()].to_vec(),
            },
            Treebank {
                sentences: treebank.sentences[r].to_vec(),
            },
        )
    };
    let (train_v, train_t) = split(0..cut);
    let (eval_v, eval_t) = if cut == treebank.len() {
        (train_v.clone(), train_t.clone())
    } else {
        split(cut..treebank.len())
    };
    let mut probe = train_structural_probe(&train_v, &train_t, cfg)?;
    probe.layer = layer;
    probe.checkpoint = ck.fingerprint();
    Ok(StructuralProbeReport {
        layer,
        rank: probe.rank(),
        train_sentences: train_t.len(),
        eval_sentences: eval_t.len(),
        uuas: eval_uuas(&probe, &eval_v, &eval_t)?,
        dspr: eval_dspr(&probe, &eval_v, &eval_t)?,
    })
}
