use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{mask_batch, LinearSchedule, LossPoint, MaskedBatch, RunResult, StepRunner, TrainConfig, TrainError};
use crate::corpus::Corpus;
use crate::model::{mlm_loss, Batch, Checkpoint, ModelConfig};
use crate::rng::stream;
use crate::tokenizer::{Tokenizer, CLS, PAD, SEP};

/// Token-id rows, each `CLS s1 SEP s2 SEP ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequences {
    pub rows: Vec<Vec<u32>>,
}

impl PackedSequences {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Right-pads the selected rows to the longest of them.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let seq = indices.iter().map(|&i| self.rows[i].len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(indices.len() * seq);
        let mut attention = Vec::with_capacity(indices.len() * seq);
        for &i in indices {
            let r = &self.rows[i];
            ids.extend(r);
            ids.extend(std::iter::repeat(PAD).take(seq - r.len()));
            attention.extend((0..seq).map(|p| p < r.len()));
        }
        Batch {
            type_ids: vec![0; ids.len()],
            ids,
            attention,
            batch: indices.len(),
            seq,
        }
    }
}

/// Greedily packs consecutive sentences into rows of at most `max_len`
/// ids. A sentence longer than a row is truncated; sentences that encode
/// to nothing are dropped.
pub fn pack_sentences(corpus: &Corpus, tokenizer: &Tokenizer, max_len: usize) -> Result<PackedSequences, TrainError> {
    let mut rows = Vec::new();
    let mut cur = vec![CLS];
    for s in &corpus.sentences {
        let enc = tokenizer.encode(s, None, max_len)?;
        let pieces = &enc.ids[1..enc.ids.len() - 1];
        if pieces.is_empty() {
            continue;
        }
        if cur.len() + pieces.len() + 1 > max_len {
            rows.push(std::mem::replace(&mut cur, vec![CLS]));
        }
        cur.extend_from_slice(pieces);
        cur.push(SEP);
    }
    if cur.len() > 1 {
        rows.push(cur);
    }
    Ok(PackedSequences { rows })
}

/// Step-at-a-time MLM training over caller-supplied masked batches.
pub struct MlmTrainer {
    config: ModelConfig,
    lineage: Vec<String>,
    runner: StepRunner,
    schedule: LinearSchedule,
    seed: u64,
    step: usize,
    curve: Vec<LossPoint>,
}

impl MlmTrainer {
    pub fn new(ck: &Checkpoint, cfg: &TrainConfig, total_steps: usize) -> Self {
        Self::with_schedule(ck, cfg, cfg.schedule(total_steps))
    }

    /// Like [`MlmTrainer::new`] with an explicit rate schedule; the one in
    /// `cfg` is ignored.
    pub fn with_schedule(ck: &Checkpoint, cfg: &TrainConfig, schedule: LinearSchedule) -> Self {
        Self {
            config: ck.config.clone(),
            lineage: ck.lineage.clone(),
            runner: StepRunner::new(ck.params.clone(), cfg.optimizer),
            schedule,
            seed: cfg.seed,
            step: 0,
            curve: Vec::new(),
        }
    }

    /// One update; returns the loss before it. Batches without any
    /// selected position advance the step counter without an update.
    pub fn step(&mut self, masked: &MaskedBatch) -> Result<Option<f64>, TrainError> {
        let step = self.step;
        self.step += 1;
        if masked.positions.is_empty() {
            return Ok(None);
        }
        let mut rng = stream(self.seed, "dropout", step as u64);
        let cfg = &self.config;
        let loss = self.runner.step(self.schedule.lr_at(step), step, |g, w| {
            mlm_loss(g, w, cfg, &masked.batch, &masked.positions, &masked.targets, Some(&mut rng))
        })?;
        self.curve.push(LossPoint { step, loss });
        Ok(Some(loss))
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn loss_curve(&self) -> &[LossPoint] {
        &self.curve
    }

    /// The current weights under the original lineage.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.runner.params.clone(),
            lineage: self.lineage.clone(),
        }
    }

    pub fn into_parts(self) -> (Checkpoint, Vec<LossPoint>) {
        (
            Checkpoint {
                config: self.config,
                params: self.runner.params,
                lineage: self.lineage,
            },
            self.curve,
        )
    }
}

/// MLM pre-training over a packed corpus. Every random choice draws from
/// streams keyed by `cfg.seed`, so the result is a pure function of the
/// inputs.
pub fn pretrain(ck: &Checkpoint, corpus: &Corpus, tokenizer: &Tokenizer, cfg: &TrainConfig) -> Result<RunResult, TrainError> {
    cfg.validate()?;
    ck.check_vocab(tokenizer)?;
    if cfg.max_seq_len > ck.config.max_positions {
        return Err(TrainError::InvalidConfig(format!(
            "max_seq_len {} exceeds max_positions {}",
            cfg.max_seq_len, ck.config.max_positions
        )));
    }
    let packed = pack_sentences(corpus, tokenizer, cfg.max_seq_len)?;
    if packed.is_empty() {
        return Err(TrainError::EmptyCorpus(corpus.name.clone()));
    }
    let per_epoch = packed.len().div_ceil(cfg.batch_size);
    let total = cfg.total_steps(per_epoch);
    let mut result = RunResult {
        checkpoint: ck.clone(),
        head: None,
        loss_curve: Vec::new(),
        dev: BTreeMap::new(),
        metric: None,
        seed: cfg.seed,
    };
    if total == 0 {
        return Ok(result);
    }

    let mut trainer = MlmTrainer::new(ck, cfg, total);
    'epochs: for epoch in 0.. {
        let mut order: Vec<usize> = (0..packed.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "pretrain-order", epoch));
        for chunk in order.chunks(cfg.batch_size) {
            if trainer.steps_done() == total {
                break 'epochs;
            }
            let batch = packed.batch(chunk);
            let mut rng = stream(cfg.seed, "mask", trainer.steps_done() as u64);
            let masked = mask_batch(&batch, ck.config.vocab_size, &cfg.masking, &mut rng);
            trainer.step(&masked)?;
        }
    }
    let (mut out, curve) = trainer.into_parts();
    out.lineage.push(format!("pretrain:{}", corpus.name));
    result.checkpoint = out;
    result.loss_curve = curve;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::tokenizer::{Vocabulary, NUM_SPECIALS, SPECIAL_TOKENS};

    fn tokenizer(words: &[&str]) -> Tokenizer {
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words.iter().map(|w| w.to_string())).collect();
        Tokenizer::new(Vocabulary::new("toy", tokens, None).unwrap(), false)
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            max_seq_len: 16,
            ..TrainConfig::pretraining()
        }
    }

    #[test]
    fn packing_is_greedy_with_separators() {
        let t = tokenizer(&["a", "b", "c"]);
        let c = Corpus::new("c", ["a b c", "a b", "c c c c c", "", "zz"]);
        let p = pack_sentences(&c, &t, 10).unwrap();
        let (a, b, cc, unk) = (5, 6, 7, 1);
        assert_eq!(
            p.rows,
            vec![
                vec![CLS, a, b, cc, SEP, a, b, SEP],
                vec![CLS, cc, cc, cc, cc, cc, SEP, unk, SEP],
            ]
        );
        assert!(p.rows.iter().all(|r| r.len() <= 10));
    }

    #[test]
    fn overlong_sentence_is_truncated_into_its_own_row() {
        let t = tokenizer(&["a"]);
        let c = Corpus::new("c", [&"a ".repeat(40)]);
        let p = pack_sentences(&c, &t, 12).unwrap();
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.rows[0].len(), 12);
    }

    #[test]
    fn zero_steps_leave_the_checkpoint_alone() {
        let w = words(40);
        let t = tokenizer(&w.iter().map(String::as_str).collect::<Vec<_>>());
        let ck = init_model(&ModelConfig::new(45, 16, 1, 2), 1).unwrap();
        let c = Corpus::new("c", ["w1 w2 w3", "w4 w5"]);
        let cfg = TrainConfig {
            max_steps: Some(0),
            ..small_cfg()
        };
        let r = pretrain(&ck, &c, &t, &cfg).unwrap();
        assert_eq!(r.checkpoint, ck);
        assert!(r.loss_curve.is_empty());
    }

    #[test]
    fn errors_on_empty_corpus_and_vocab_mismatch() {
        let t = tokenizer(&["a"]);
        let ck = init_model(&ModelConfig::new(6, 16, 1, 2), 1).unwrap();
        assert!(matches!(
            pretrain(&ck, &Corpus::new("e", [""]), &t, &small_cfg()),
            Err(TrainError::EmptyCorpus(_))
        ));
        let big = init_model(&ModelConfig::new(9, 16, 1, 2), 1).unwrap();
        assert!(matches!(
            pretrain(&big, &Corpus::new("c", ["a"]), &t, &small_cfg()),
            Err(TrainError::Model(_))
        ));
    }

    fn toy_run(seed: u64) -> RunResult {
        let w = words(60);
        let t = tokenizer(&w.iter().map(String::as_str).collect::<Vec<_>>());
        let ck = init_model(&ModelConfig::new(65, 16, 1, 2), 3).unwrap();
        let sentences: Vec<String> = (0..30).map(|i| format!("w{} w{} w{} w{}", i, i + 1, (i * 7) % 60, (i * 3) % 60)).collect();
        let c = Corpus::new("toy", sentences);
        let cfg = TrainConfig { seed, ..small_cfg() };
        pretrain(&ck, &c, &t, &cfg).unwrap()
    }

    #[test]
    fn deterministic_per_seed_with_lineage_and_curve() {
        let a = toy_run(5);
        let b = toy_run(5);
        assert_eq!(a, b);
        assert_eq!(a.checkpoint.lineage.last().unwrap(), "pretrain:toy");
        assert!(!a.loss_curve.is_empty());
        assert!(a.loss_curve.windows(2).all(|p| p[0].step < p[1].step));
        assert!(a.loss_curve.iter().all(|p| p.loss.is_finite()));
        assert_ne!(toy_run(6).checkpoint, a.checkpoint);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let v = 2000;
        let ck = init_model(&ModelConfig::new(v, 64, 2, 2), 0).unwrap();
        let rows: Vec<Vec<u32>> = (0..8)
            .map(|r| {
                let mut row = vec![CLS];
                row.extend((0..30).map(|i| (NUM_SPECIALS + (r * 131 + i * 17) % (v - NUM_SPECIALS)) as u32));
                row.push(SEP);
                row
            })
            .collect();
        let p = PackedSequences { rows };
        let batch = p.batch(&(0..8).collect::<Vec<_>>());
        let masked = mask_batch(&batch, v, &Default::default(), &mut stream(0, "mask", 0));
        let mut trainer = MlmTrainer::new(&ck, &small_cfg(), 1);
        let loss = trainer.step(&masked).unwrap().unwrap();
        assert!((loss - ((v - 5) as f64).ln()).abs() < 0.5, "{loss}");
    }

    #[test]
    fn present_token_rows_move_beyond_decay() {
        let v = 40;
        let ck = init_model(&ModelConfig::new(v, 16, 1, 2), 2).unwrap();
        let p = PackedSequences {
            rows: vec![vec![CLS, 5, 6, 7, 8, 9, SEP], vec![CLS, 9, 8, 7, 6, 5, SEP]],
        };
        let batch = p.batch(&[0, 1]);
        let masked = mask_batch(&batch, v, &Default::default(), &mut stream(1, "mask", 0));
        assert!(!masked.positions.is_empty());
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..small_cfg()
        };
        let mut trainer = MlmTrainer::new(&ck, &cfg, 1);
        trainer.step(&masked).unwrap();
        let after = trainer.checkpoint();
        let (e0, e1) = (ck.word_embeddings(), after.word_embeddings());
        let factor = 1.0 - (cfg.schedule(1).lr_at(0) * cfg.optimizer.weight_decay) as f32;
        for r in 5usize..10 {
            assert!(e0.row(r).iter().zip(e1.row(r)).any(|(a, b)| (a * factor - b).abs() > 1e-4), "row {r}");
        }
    }
}
