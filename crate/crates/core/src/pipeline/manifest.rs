use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::corpus::{SyntheticLanguageSpec, SYNTHETIC_TASKS};
use crate::metrics::{AvgConvention, TaskPair};
use crate::model::ModelConfig;
use crate::probing::ProbeConfig;
use crate::training::TrainConfig;

/// Where a language's corpus, treebank and tasks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LanguageSource {
    Synthetic(SyntheticLanguageSpec),
    Files {
        name: String,
        corpus: PathBuf,
        #[serde(default)]
        treebank: Option<PathBuf>,
        /// Task name to JSON-Lines file (manifest alongside).
        #[serde(default)]
        tasks: BTreeMap<String, PathBuf>,
    },
}

impl LanguageSource {
    pub fn name(&self) -> &str {
        match self {
            LanguageSource::Synthetic(s) => &s.name,
            LanguageSource::Files { name, .. } => name,
        }
    }

    pub fn has_treebank(&self) -> bool {
        match self {
            LanguageSource::Synthetic(_) => true,
            LanguageSource::Files { treebank, .. } => treebank.is_some(),
        }
    }

    /// Task names this language can provide. Synthetic languages without a
    /// pronoun category cannot derive `gender_pairs`.
    pub fn task_names(&self) -> BTreeSet<String> {
        match self {
            LanguageSource::Synthetic(s) => SYNTHETIC_TASKS
                .iter()
                .filter(|&&t| t != "gender_pairs" || s.categories.iter().any(|c| c.upos == "PRON"))
                .map(|t| t.to_string())
                .collect(),
            LanguageSource::Files { tasks, .. } => tasks.keys().cloned().collect(),
        }
    }
}

/// One row of the main results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The source model fine-tuned directly, with its own tokenizer.
    SourceDirect,
    /// A model pre-trained from scratch on the target corpus.
    TargetScratch,
    Swap,
    Keep,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SourceDirect, Variant::TargetScratch, Variant::Swap, Variant::Keep];

    pub fn key(self) -> &'static str {
        match self {
            Variant::SourceDirect => "source_direct",
            Variant::TargetScratch => "target_scratch",
            Variant::Swap => "swap",
            Variant::Keep => "keep",
        }
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, Variant::Swap | Variant::Keep)
    }

    /// The `(lang, vocab)` row label.
    pub fn label(self, source: &str, target: &str) -> (String, String) {
        let moved = format!("{source}->{target}");
        match self {
            Variant::SourceDirect => (source.into(), source.into()),
            Variant::TargetScratch => (target.into(), target.into()),
            Variant::Swap => (moved, target.into()),
            Variant::Keep => (moved, source.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            lowercase: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub structural: ProbeConfig,
    /// Leading treebank sentences handed to the probe.
    pub max_sentences: usize,
    /// Target-language task used for the WiC column.
    pub wic_task: Option<String>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            structural: ProbeConfig::default(),
            max_sentences: 500,
            wic_task: Some("wic".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSettings {
    /// A task of the source language.
    pub source_task: String,
    /// Its counterpart in the target language.
    pub target_task: String,
    pub perplexity_mask_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub source: LanguageSource,
    pub target: LanguageSource,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    /// `vocab_size` is replaced by each trained tokenizer's actual size.
    pub model: ModelConfig,
    pub variants: Vec<Variant>,
    /// Source model, and the scratch baseline on the target corpus.
    pub pretrain: TrainConfig,
    /// Continued pre-training of SWAP and KEEP on the target corpus.
    pub continue_pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Target-language tasks, in column order.
    pub tasks: Vec<String>,
    #[serde(default)]
    pub task_pairs: Vec<TaskPair>,
    #[serde(default)]
    pub avg_convention: AvgConvention,
    #[serde(default)]
    pub probe: Option<ProbeSettings>,
    #[serde(default)]
    pub forgetting: Option<ForgettingSettings>,
    /// Target-language minimal-pair task for the parity table.
    #[serde(default)]
    pub gender_task: Option<String>,
    /// Model initialization and pre-training seed.
    pub seed: u64,
    /// Fine-tuning seeds.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentManifest {
    /// Two disjoint synthetic languages, a 2-layer H=64 model, three tasks
    /// and three seeds; sized for a single laptop core.
    pub fn desk() -> Self {
        let mut source = SyntheticLanguageSpec::desk("src", "abcdefghijklm", ".", 11);
        let mut target = SyntheticLanguageSpec::desk("tgt", "nopqrstuvwxyz", "?", 12);
        for s in [&mut source, &mut target] {
            s.num_sentences = 2000;
            s.task_examples = 300;
        }
        let mut model = ModelConfig::desk();
        model.vocab_size = 2000;
        let pretrain = TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            max_seq_len: 64,
            epochs: 1000,
            max_steps: Some(400),
            ..TrainConfig::pretraining()
        };
        Self {
            name: "desk".into(),
            source: LanguageSource::Synthetic(source),
            target: LanguageSource::Synthetic(target),
            tokenizer: TokenizerSettings::default(),
            model,
            variants: Variant::ALL.to_vec(),
            continue_pretrain: TrainConfig {
                max_steps: Some(300),
                ..pretrain.clone()
            },
            pretrain,
            finetune: TrainConfig {
                batch_size: 32,
                learning_rate: 1e-3,
                max_seq_len: 32,
                epochs: 8,
                ..TrainConfig::finetuning()
            },
            tasks: vec!["grammaticality".into(), "sentiment".into(), "similarity".into()],
            task_pairs: Vec::new(),
            avg_convention: AvgConvention::FlatColumns,
            probe: Some(ProbeSettings {
                structural: ProbeConfig {
                    steps: 500,
                    ..ProbeConfig::default()
                },
                max_sentences: 300,
                wic_task: Some("wic".into()),
            }),
            forgetting: Some(ForgettingSettings {
                source_task: "sentiment".into(),
                target_task: "sentiment".into(),
                perplexity_mask_seed: 1000,
            }),
            gender_task: Some("gender_pairs".into()),
            seed: 1,
            seeds: vec![1, 2, 3],
            output_dir: None,
        }
    }

    /// Checks every cross-reference before any compute runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Manifest(m));
        let (src, tgt) = (self.source.name(), self.target.name());
        if src.is_empty() || tgt.is_empty() || src == tgt {
            return bad(format!("language names must be distinct and non-empty, got {src:?} and {tgt:?}"));
        }
        for (side, lang) in [("source", &self.source), ("target", &self.target)] {
            if let LanguageSource::Synthetic(spec) = lang {
                spec.validate().map_err(|e| PipelineError::Manifest(format!("{side} language: {e}")))?;
            }
        }
        if self.tokenizer.vocab_size != self.model.vocab_size {
            return bad(format!(
                "model vocab_size {} differs from tokenizer vocab_size {}",
                self.model.vocab_size, self.tokenizer.vocab_size
            ));
        }
        self.model.validate().map_err(|e| PipelineError::Manifest(format!("model: {e}")))?;
        for (what, cfg) in [("pretrain", &self.pretrain), ("continue_pretrain", &self.continue_pretrain), ("finetune", &self.finetune)] {
            cfg.validate().map_err(|e| PipelineError::Manifest(format!("{what}: {e}")))?;
        }
        if self.seeds.len() < 2 {
            return bad(format!("need at least two fine-tuning seeds, got {}", self.seeds.len()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("duplicate fine-tuning seeds".into());
        }
        if self.variants.is_empty() || self.variants.iter().collect::<BTreeSet<_>>().len() != self.variants.len() {
            return bad("variants must be non-empty and distinct".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        let target_tasks = self.target.task_names();
        let undefined = |what: &str, t: &str, side: &str| format!("{what} references undefined {side} task {t:?}");
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !target_tasks.contains(t) {
                return bad(undefined("tasks", t, "target"));
            }
            if !seen.insert(t) {
                return bad(format!("task {t:?} listed twice"));
            }
        }
        for p in &self.task_pairs {
            for t in [&p.first, &p.second] {
                if !self.tasks.contains(t) {
                    return bad(format!("task pair {:?} references unlisted task {t:?}", p.name));
                }
            }
        }
        if let Some(p) = &self.probe {
            if !self.target.has_treebank() {
                return bad("probe settings need a target treebank".into());
            }
            if let Some(w) = &p.wic_task {
                if !target_tasks.contains(w) {
                    return bad(undefined("probe.wic_task", w, "target"));
                }
            }
        }
        if let Some(f) = &self.forgetting {
            if !self.source.task_names().contains(&f.source_task) {
                return bad(undefined("forgetting.source_task", &f.source_task, "source"));
            }
            if !target_tasks.contains(&f.target_task) {
                return bad(undefined("forgetting.target_task", &f.target_task, "target"));
            }
            for v in [Variant::SourceDirect, Variant::Swap, Variant::Keep] {
                if !self.variants.contains(&v) {
                    return bad(format!("forgetting evaluation needs variant {}", v.key()));
                }
            }
        }
        if let Some(g) = &self.gender_task {
            if !target_tasks.contains(g) {
                return bad(undefined("gender_task", g, "target"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir = None;
        let json = serde_json::to_vec(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_manifest_is_valid_and_round_trips() {
        let m = ExperimentManifest::desk();
        m.validate().unwrap();
        let json = serde_json::to_string_pretty(&m).unwrap();
        let back: ExperimentManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let m = ExperimentManifest::desk();
        let mut moved = m.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), m.hash());
        let mut reseeded = m.clone();
        reseeded.seed = 2;
        assert_ne!(reseeded.hash(), m.hash());
    }

    fn rejects(f: impl FnOnce(&mut ExperimentManifest), needle: &str) {
        let mut m = ExperimentManifest::desk();
        f(&mut m);
        match m.validate() {
            Err(PipelineError::Manifest(msg)) => assert!(msg.contains(needle), "{msg}"),
            other => panic!("expected manifest error containing {needle:?}, got {other:?}"),
        }
    }

    #[test]
    fn undefined_references_are_rejected() {
        rejects(|m| m.tasks.push("parsing".into()), "undefined target task \"parsing\"");
        rejects(|m| m.forgetting.as_mut().unwrap().source_task = "nope".into(), "undefined source task");
        rejects(|m| m.gender_task = Some("nope".into()), "gender_task");
        rejects(|m| m.probe.as_mut().unwrap().wic_task = Some("nope".into()), "wic_task");
        rejects(
            |m| {
                m.task_pairs.push(TaskPair {
                    name: "nli".into(),
                    first: "inference".into(),
                    second: "sentiment".into(),
                })
            },
            "unlisted task \"inference\"",
        );
        rejects(|m| m.variants.retain(|v| *v != Variant::Keep), "needs variant keep");
    }

    #[test]
    fn structural_problems_are_rejected() {
        rejects(|m| m.seeds = vec![1], "at least two");
        rejects(|m| m.seeds = vec![1, 1], "duplicate");
        rejects(|m| m.model.vocab_size = 100, "differs");
        rejects(|m| m.tasks.push("sentiment".into()), "twice");
        rejects(
            |m| {
                if let LanguageSource::Synthetic(s) = &mut m.target {
                    s.name = "src".into();
                }
            },
            "distinct",
        );
    }

    #[test]
    fn row_labels() {
        assert_eq!(Variant::Swap.label("sv", "en"), ("sv->en".into(), "en".into()));
        assert_eq!(Variant::Keep.label("sv", "en"), ("sv->en".into(), "sv".into()));
        assert_eq!(Variant::TargetScratch.label("sv", "en"), ("en".into(), "en".into()));
        assert_eq!(Variant::SourceDirect.label("sv", "en"), ("sv".into(), "sv".into()));
    }
}
