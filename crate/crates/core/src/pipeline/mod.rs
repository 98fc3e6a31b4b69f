//! Manifest-driven experiment: corpora, tokenizers, pre-training, the four
//! model variants, fine-tuning, probes, forgetting, and reports.
//!
//! Every stage writes into `stages/<id>/` and drops `stage.json` last. A
//! stage whose record carries the same input hash is reused, so a re-run
//! of a finished manifest trains nothing. Input hashes depend only on the
//! manifest, input file contents and the crate version.

mod manifest;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{gen_synthetic_language, load_task_dataset, parse_conllu, read_text_corpus, save_task_dataset, write_conllu, Corpus, CorpusError, TaskDataset, Treebank};
use crate::forgetting::{eval_bidirectional, mlm_perplexity, BidirectionalEvalPlan, BidirectionalReport, ForgettingError, Perplexity, RosterEntry};
use crate::metrics::MetricsError;
use crate::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelError};
use crate::probing::{probe_structural, wic_probe, ProbeError, StructuralProbeReport};
use crate::tokenizer::{train_wordpiece, Tokenizer, TokenizerError};
use crate::training::{multi_seed_finetune, pretrain, write_loss_curve, LossPoint, MultiSeedResult, TrainError};
use crate::transfer::{apply_transfer, TransferError, TransferVariant};

pub use manifest::{ExperimentManifest, ForgettingSettings, LanguageSource, ProbeSettings, TokenizerSettings, Variant};
pub use report::{emit_report, REPORT_FILES};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STAGE_FILE: &str = "stage.json";
const LOSS_FILE: &str = "loss.csv";
const RESULT_FILE: &str = "result.json";

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Forgetting(#[from] ForgettingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: StageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    Ok(serde_json::from_slice(&fs::read(path).map_err(io_err(path))?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Compute every stage that is not already complete.
    Execute,
    /// Compute nothing; incomplete stages surface as missing report cells.
    ReportOnly,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub stages_run: usize,
    pub stages_skipped: usize,
    pub warnings: Vec<String>,
    pub report_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    id: String,
    input_hash: String,
    version: String,
}

/// A stage's identity: its id and the hash of everything it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageKey {
    pub id: String,
    pub hash: String,
}

impl StageKey {
    fn new(id: impl Into<String>, inputs: &[&str]) -> Self {
        let id = id.into();
        let mut h = Sha256::new();
        for part in [VERSION, id.as_str()].iter().chain(inputs) {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        Self {
            hash: hex::encode(h.finalize()),
            id,
        }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("stages").join(self.id.replace(':', "__"))
    }

    pub fn is_complete(&self, root: &Path) -> bool {
        read_json::<StageRecord>(&self.dir(root).join(STAGE_FILE)).is_ok_and(|r| r.input_hash == self.hash && r.version == VERSION)
    }

    fn fail(&self, source: impl Into<StageError>) -> PipelineError {
        PipelineError::Stage {
            stage: self.id.clone(),
            source: source.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ran {
    Computed,
    Reused,
    Absent,
}

/// Reuses a complete stage or produces it into a clean directory. The
/// record is written only after `produce` succeeds.
fn run_stage(
    root: &Path,
    key: &StageKey,
    mode: RunMode,
    produce: impl FnOnce(&Path) -> Result<(), StageError>,
) -> Result<Ran, PipelineError> {
    if key.is_complete(root) {
        return Ok(Ran::Reused);
    }
    if mode == RunMode::ReportOnly {
        return Ok(Ran::Absent);
    }
    let dir = key.dir(root);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| key.fail(io_err(&dir)(e)))?;
    }
    fs::create_dir_all(&dir).map_err(|e| key.fail(io_err(&dir)(e)))?;
    produce(&dir).map_err(|e| key.fail(e))?;
    let record = StageRecord {
        id: key.id.clone(),
        input_hash: key.hash.clone(),
        version: VERSION.into(),
    };
    write_json(&dir.join(STAGE_FILE), &record).map_err(|e| key.fail(e))?;
    Ok(Ran::Computed)
}

/// A language as the pipeline consumes it, loaded from its stage directory.
#[derive(Clone, Debug)]
pub struct LanguageData {
    pub name: String,
    pub corpus: Corpus,
    pub treebank: Option<Treebank>,
    pub tasks: BTreeMap<String, TaskDataset>,
}

impl LanguageData {
    fn write(&self, dir: &Path) -> Result<(), StageError> {
        self.corpus.write(&dir.join("corpus.txt"))?;
        if let Some(tb) = &self.treebank {
            let p = dir.join("treebank.conllu");
            fs::write(&p, write_conllu(tb)).map_err(io_err(&p))?;
        }
        for ds in self.tasks.values() {
            save_task_dataset(ds, &dir.join("tasks"))?;
        }
        Ok(())
    }

    pub fn load(name: &str, dir: &Path) -> Result<Self, StageError> {
        let mut corpus = read_text_corpus(&dir.join("corpus.txt"))?;
        corpus.name = name.into();
        let tb = dir.join("treebank.conllu");
        let treebank = tb.exists().then(|| parse_conllu(&tb)).transpose()?;
        let mut tasks = BTreeMap::new();
        let task_dir = dir.join("tasks");
        if task_dir.exists() {
            let mut files: Vec<PathBuf> = fs::read_dir(&task_dir)
                .map_err(io_err(&task_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            for f in files {
                let ds = load_task_dataset(&f)?;
                tasks.insert(ds.name.clone(), ds);
            }
        }
        Ok(Self {
            name: name.into(),
            corpus,
            treebank,
            tasks,
        })
    }

    pub fn task(&self, name: &str) -> Result<&TaskDataset, StageError> {
        self.tasks
            .get(name)
            .ok_or_else(|| StageError::Missing(format!("language {:?} has no task {name:?}", self.name)))
    }
}

fn materialize(source: &LanguageSource) -> Result<LanguageData, StageError> {
    match source {
        LanguageSource::Synthetic(spec) => {
            let lang = gen_synthetic_language(spec)?;
            Ok(LanguageData {
                name: spec.name.clone(),
                corpus: Corpus::new(spec.name.clone(), lang.corpus.sentences),
                treebank: Some(lang.treebank),
                tasks: lang.tasks,
            })
        }
        LanguageSource::Files { name, corpus, treebank, tasks } => {
            let mut c = read_text_corpus(corpus)?;
            c.name = name.clone();
            let mut loaded = BTreeMap::new();
            for (task, path) in tasks {
                let mut ds = load_task_dataset(path)?;
                ds.name = task.clone();
                loaded.insert(task.clone(), ds);
            }
            Ok(LanguageData {
                name: name.clone(),
                corpus: c,
                treebank: treebank.as_deref().map(parse_conllu).transpose()?,
                tasks: loaded,
            })
        }
    }
}

/// Manifest JSON plus, for file-backed languages, the bytes of every file.
fn language_fingerprint(source: &LanguageSource) -> Result<String, StageError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(source)?);
    if let LanguageSource::Files { corpus, treebank, tasks, .. } = source {
        let mut paths: Vec<PathBuf> = vec![corpus.clone()];
        paths.extend(treebank.iter().cloned());
        for p in tasks.values() {
            paths.push(p.clone());
            paths.push(crate::corpus::manifest_path_for(p));
        }
        for p in paths {
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("config serializes")
}

/// Outcome of the probe stage for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub structural: StructuralProbeReport,
    pub wic: Option<MultiSeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub model: String,
    pub tokenizer: String,
    pub perplexity: Perplexity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingOutcome {
    pub source_task: String,
    pub target_task: String,
    pub report: BidirectionalReport,
    pub perplexity: Vec<PerplexityRow>,
}

/// Where a report cell's number came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSource {
    pub stage: String,
    pub input_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub variant: Variant,
    pub lang: String,
    pub vocab: String,
    /// Task name to result and the stage that produced it.
    pub tasks: BTreeMap<String, (MultiSeedResult, CellSource)>,
    pub probe: Option<(ProbeOutcome, CellSource)>,
    pub gender: Option<(MultiSeedResult, CellSource)>,
    pub loss_curve: Option<Vec<LossPoint>>,
}

impl RowResult {
    pub fn name(&self) -> String {
        format!("[{}][{}]", self.lang, self.vocab)
    }
}

/// Everything the reports are rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResults {
    pub manifest: ExperimentManifest,
    pub manifest_hash: String,
    pub rows: Vec<RowResult>,
    pub forgetting: Option<(ForgettingOutcome, CellSource)>,
    /// Stage id to input hash, for every stage the manifest defines.
    pub stages: BTreeMap<String, String>,
}

struct Keys {
    lang_src: StageKey,
    lang_tgt: StageKey,
    tok_src: StageKey,
    tok_tgt: StageKey,
    /// The source model; also the SWAP and KEEP parent.
    source: StageKey,
    models: BTreeMap<Variant, StageKey>,
    finetune: BTreeMap<(Variant, String), StageKey>,
    probe: BTreeMap<Variant, StageKey>,
    gender: BTreeMap<Variant, StageKey>,
    forgetting: Option<StageKey>,
}

impl Keys {
    fn all(&self) -> Vec<&StageKey> {
        let mut v = vec![&self.lang_src, &self.lang_tgt, &self.tok_src, &self.tok_tgt];
        if self.models.keys().any(|v| *v != Variant::TargetScratch) {
            v.push(&self.source);
        }
        v.extend(self.models.values().filter(|m| m.id != self.source.id));
        v.extend(self.finetune.values());
        v.extend(self.probe.values());
        v.extend(self.gender.values());
        v.extend(self.forgetting.iter());
        v
    }
}

fn stage_keys(m: &ExperimentManifest) -> Result<Keys, PipelineError> {
    let fp = |side: &str, s: &LanguageSource| {
        language_fingerprint(s).map_err(|e| PipelineError::Stage {
            stage: format!("lang:{side}"),
            source: e,
        })
    };
    let lang_src = StageKey::new("lang:source", &[&fp("source", &m.source)?]);
    let lang_tgt = StageKey::new("lang:target", &[&fp("target", &m.target)?]);
    let tok = json(&m.tokenizer);
    let tok_src = StageKey::new("tok:source", &[&lang_src.hash, &tok]);
    let tok_tgt = StageKey::new("tok:target", &[&lang_tgt.hash, &tok]);
    let (model, pre, cont, seed) = (json(&m.model), json(&m.pretrain), json(&m.continue_pretrain), m.seed.to_string());
    let source = StageKey::new("pretrain:source", &[&lang_src.hash, &tok_src.hash, &model, &pre, &seed]);
    let mut models = BTreeMap::new();
    for &v in &m.variants {
        let key = match v {
            Variant::SourceDirect => source.clone(),
            Variant::TargetScratch => StageKey::new("pretrain:scratch", &[&lang_tgt.hash, &tok_tgt.hash, &model, &pre, &seed]),
            Variant::Swap | Variant::Keep => StageKey::new(
                format!("transfer:{}", v.key()),
                &[&source.hash, &lang_tgt.hash, &tok_src.hash, &tok_tgt.hash, &cont, &seed],
            ),
        };
        models.insert(v, key);
    }
    let (ft, seeds) = (json(&m.finetune), json(&m.seeds));
    let mut finetune = BTreeMap::new();
    let mut probe = BTreeMap::new();
    let mut gender = BTreeMap::new();
    for (&v, mk) in &models {
        for t in &m.tasks {
            let key = StageKey::new(format!("finetune:{}:{t}", v.key()), &[&mk.hash, &lang_tgt.hash, &ft, &seeds, t]);
            finetune.insert((v, t.clone()), key);
        }
        if let Some(p) = &m.probe {
            probe.insert(v, StageKey::new(format!("probe:{}", v.key()), &[&mk.hash, &lang_tgt.hash, &json(p), &ft, &seeds]));
        }
        if let Some(g) = &m.gender_task {
            gender.insert(v, StageKey::new(format!("gender:{}", v.key()), &[&mk.hash, &lang_tgt.hash, &ft, &seeds, g]));
        }
    }
    let forgetting = m.forgetting.as_ref().map(|f| {
        let mut inputs: Vec<&str> = vec![&lang_src.hash, &lang_tgt.hash, &tok_src.hash, &tok_tgt.hash, &ft, &seeds, &pre];
        let fj = json(f);
        inputs.push(&fj);
        for v in [Variant::SourceDirect, Variant::Swap, Variant::Keep] {
            inputs.push(&models[&v].hash);
        }
        StageKey::new("forgetting", &inputs)
    });
    Ok(Keys {
        lang_src,
        lang_tgt,
        tok_src,
        tok_tgt,
        source,
        models,
        finetune,
        probe,
        gender,
        forgetting,
    })
}

struct Ctx<'a> {
    m: &'a ExperimentManifest,
    root: &'a Path,
    mode: RunMode,
    keys: Keys,
}

fn loaded_model(key: &StageKey, root: &Path) -> Result<(Checkpoint, Tokenizer), PipelineError> {
    let l = load_checkpoint(&key.dir(root)).map_err(|e| key.fail(e))?;
    Ok((l.checkpoint, l.tokenizer))
}

fn load_tokenizer(key: &StageKey, root: &Path) -> Result<Tokenizer, PipelineError> {
    Tokenizer::load(&key.dir(root)).map_err(|e| key.fail(e))
}

impl Ctx<'_> {
    fn language(&self, target: bool) -> Result<LanguageData, PipelineError> {
        let (key, src) = if target {
            (&self.keys.lang_tgt, &self.m.target)
        } else {
            (&self.keys.lang_src, &self.m.source)
        };
        LanguageData::load(src.name(), &key.dir(self.root)).map_err(|e| key.fail(e))
    }

    fn stage(&self, key: &StageKey, produce: impl FnOnce(&Path) -> Result<(), StageError>) -> Result<Ran, PipelineError> {
        run_stage(self.root, key, self.mode, produce)
    }

    fn pretrain_stage(&self, key: &StageKey, target: bool) -> Result<Ran, PipelineError> {
        let tok_key = if target { &self.keys.tok_tgt } else { &self.keys.tok_src };
        if key.is_complete(self.root) || self.mode == RunMode::ReportOnly {
            return self.stage(key, |_| Ok(()));
        }
        let lang = self.language(target)?;
        let tok = load_tokenizer(tok_key, self.root)?;
        self.stage(key, |dir| {
            let mut config = self.m.model.clone();
            config.vocab_size = tok.len();
            let init = init_model(&config, self.m.seed)?;
            let cfg = crate::training::TrainConfig {
                seed: self.m.seed,
                ..self.m.pretrain.clone()
            };
            let run = pretrain(&init, &lang.corpus, &tok, &cfg)?;
            save_checkpoint(&run.checkpoint, &tok, dir)?;
            write_loss_curve(&run.loss_curve, &dir.join(LOSS_FILE))?;
            Ok(())
        })
    }

    fn transfer_stage(&self, v: Variant) -> Result<Ran, PipelineError> {
        let key = &self.keys.models[&v];
        if key.is_complete(self.root) || self.mode == RunMode::ReportOnly {
            return self.stage(key, |_| Ok(()));
        }
        let (source, src_tok) = loaded_model(&self.keys.source, self.root)?;
        let tgt_tok = load_tokenizer(&self.keys.tok_tgt, self.root)?;
        let lang = self.language(true)?;
        let variant = if v == Variant::Swap {
            TransferVariant::Swap
        } else {
            TransferVariant::Keep
        };
        self.stage(key, |dir| {
            let (ck, tok) = apply_transfer(variant, &source, &src_tok, &tgt_tok)?;
            let cfg = crate::training::TrainConfig {
                seed: self.m.seed,
                ..self.m.continue_pretrain.clone()
            };
            let run = pretrain(&ck, &lang.corpus, &tok, &cfg)?;
            save_checkpoint(&run.checkpoint, &tok, dir)?;
            write_loss_curve(&run.loss_curve, &dir.join(LOSS_FILE))?;
            Ok(())
        })
    }
}

enum Job {
    Finetune(Variant, String),
    Probe(Variant),
    Gender(Variant),
    Forgetting,
}

impl Ctx<'_> {
    fn job_key(&self, job: &Job) -> &StageKey {
        match job {
            Job::Finetune(v, t) => &self.keys.finetune[&(*v, t.clone())],
            Job::Probe(v) => &self.keys.probe[v],
            Job::Gender(v) => &self.keys.gender[v],
            Job::Forgetting => self.keys.forgetting.as_ref().expect("forgetting job only when configured"),
        }
    }

    fn run_job(&self, job: &Job, target: &LanguageData) -> Result<Ran, PipelineError> {
        let key = self.job_key(job);
        if key.is_complete(self.root) || self.mode == RunMode::ReportOnly {
            return self.stage(key, |_| Ok(()));
        }
        let m = self.m;
        match job {
            Job::Finetune(v, t) => {
                let (ck, tok) = loaded_model(&self.keys.models[v], self.root)?;
                self.stage(key, |dir| {
                    let r = multi_seed_finetune(&ck, &tok, target.task(t)?, &m.finetune, &m.seeds, true)?;
                    write_json(&dir.join(RESULT_FILE), &r)
                })
            }
            Job::Gender(v) => {
                let (ck, tok) = loaded_model(&self.keys.models[v], self.root)?;
                let task = m.gender_task.as_deref().expect("gender job only when configured");
                self.stage(key, |dir| {
                    let r = multi_seed_finetune(&ck, &tok, target.task(task)?, &m.finetune, &m.seeds, true)?;
                    write_json(&dir.join(RESULT_FILE), &r)
                })
            }
            Job::Probe(v) => {
                let (ck, tok) = loaded_model(&self.keys.models[v], self.root)?;
                let p = m.probe.as_ref().expect("probe job only when configured");
                self.stage(key, |dir| {
                    let tb = target
                        .treebank
                        .as_ref()
                        .ok_or_else(|| StageError::Missing(format!("language {:?} has no treebank", target.name)))?;
                    let tb = Treebank {
                        sentences: tb.sentences.iter().take(p.max_sentences).cloned().collect(),
                    };
                    let structural = probe_structural(&ck, &tok, &tb, &p.structural)?;
                    let wic = match &p.wic_task {
                        Some(w) => Some(wic_probe(&ck, &tok, target.task(w)?, &m.finetune, &m.seeds)?),
                        None => None,
                    };
                    write_json(&dir.join(RESULT_FILE), &ProbeOutcome { structural, wic })
                })
            }
            Job::Forgetting => {
                let f = m.forgetting.as_ref().expect("forgetting job only when configured");
                let source = self.language(false)?;
                let mut roster = Vec::new();
                for v in [Variant::SourceDirect, Variant::Swap, Variant::Keep] {
                    let (checkpoint, tokenizer) = loaded_model(&self.keys.models[&v], self.root)?;
                    let (lang, vocab) = v.label(source.name.as_str(), target.name.as_str());
                    roster.push(RosterEntry {
                        name: format!("[{lang}][{vocab}]"),
                        checkpoint,
                        tokenizer,
                    });
                }
                self.stage(key, |dir| {
                    let rename = |ds: &TaskDataset, lang: &str| TaskDataset {
                        name: format!("{lang}:{}", ds.name),
                        ..ds.clone()
                    };
                    let plan = BidirectionalEvalPlan {
                        group: m.name.clone(),
                        source_task: rename(source.task(&f.source_task)?, &source.name),
                        target_task: rename(target.task(&f.target_task)?, &target.name),
                        roster,
                        seeds: m.seeds.clone(),
                        train: m.finetune.clone(),
                    };
                    let report = eval_bidirectional(&plan)?;
                    // KEEP still reads source text with the source vocabulary
                    let mut perplexity = Vec::new();
                    for e in plan.roster.iter().filter(|e| e.tokenizer.name() == source.name) {
                        let p = mlm_perplexity(&e.checkpoint, &source.corpus, &e.tokenizer, f.perplexity_mask_seed, m.pretrain.max_seq_len)?;
                        perplexity.push(PerplexityRow {
                            model: e.name.clone(),
                            tokenizer: e.tokenizer.name().to_string(),
                            perplexity: p,
                        });
                    }
                    write_json(
                        &dir.join(RESULT_FILE),
                        &ForgettingOutcome {
                            source_task: plan.source_task.name.clone(),
                            target_task: plan.target_task.name.clone(),
                            report,
                            perplexity,
                        },
                    )
                })
            }
        }
    }
}

fn tally(summary: &mut RunSummary, key: &StageKey, ran: Ran) {
    match ran {
        Ran::Computed => summary.stages_run += 1,
        Ran::Reused => summary.stages_skipped += 1,
        Ran::Absent => summary.warnings.push(format!("stage {} has not run", key.id)),
    }
}

/// Runs (or resumes) the whole experiment under `out` and writes the
/// reports to `out/reports`.
pub fn run_experiment(m: &ExperimentManifest, out: &Path) -> Result<RunSummary, PipelineError> {
    run_experiment_with(m, out, RunMode::Execute)
}

pub fn run_experiment_with(m: &ExperimentManifest, out: &Path, mode: RunMode) -> Result<RunSummary, PipelineError> {
    m.validate()?;
    let ctx = Ctx {
        m,
        root: out,
        mode,
        keys: stage_keys(m)?,
    };
    let k = &ctx.keys;
    let mut summary = RunSummary::default();
    write_manifest_copy(m, out)?;

    for (key, src) in [(&k.lang_src, &m.source), (&k.lang_tgt, &m.target)] {
        let ran = ctx.stage(key, |dir| materialize(src)?.write(dir))?;
        tally(&mut summary, key, ran);
    }
    for (key, target) in [(&k.tok_src, false), (&k.tok_tgt, true)] {
        let ran = if key.is_complete(out) || mode == RunMode::ReportOnly {
            ctx.stage(key, |_| Ok(()))?
        } else {
            let lang = ctx.language(target)?;
            ctx.stage(key, |dir| {
                let tok = train_wordpiece(&lang.corpus, m.tokenizer.vocab_size, m.tokenizer.lowercase)?;
                Ok(tok.save(dir)?)
            })?
        };
        tally(&mut summary, key, ran);
    }

    // the source branch (source model, then SWAP and KEEP) is independent
    // of the scratch baseline
    let needs_source = m.variants.iter().any(|v| *v != Variant::TargetScratch);
    let source_branch = || -> Result<Vec<(StageKey, Ran)>, PipelineError> {
        let mut done = Vec::new();
        if !needs_source {
            return Ok(done);
        }
        done.push((k.source.clone(), ctx.pretrain_stage(&k.source, false)?));
        let transfers: Vec<Variant> = m.variants.iter().copied().filter(|v| v.is_transfer()).collect();
        let results: Vec<Result<(StageKey, Ran), PipelineError>> = transfers
            .par_iter()
            .map(|&v| ctx.transfer_stage(v).map(|r| (k.models[&v].clone(), r)))
            .collect();
        for r in results {
            done.push(r?);
        }
        Ok(done)
    };
    let scratch_branch = || -> Result<Option<(StageKey, Ran)>, PipelineError> {
        match k.models.get(&Variant::TargetScratch) {
            Some(key) => Ok(Some((key.clone(), ctx.pretrain_stage(key, true)?))),
            None => Ok(None),
        }
    };
    let (src_done, scratch_done) = rayon::join(source_branch, scratch_branch);
    for (key, ran) in src_done?.into_iter().chain(scratch_done?) {
        tally(&mut summary, &key, ran);
    }

    let target = match ctx.language(true) {
        Ok(t) => Some(t),
        Err(e) if mode == RunMode::ReportOnly => {
            summary.warnings.push(e.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(target) = &target {
        let mut jobs = Vec::new();
        for &v in &m.variants {
            jobs.extend(m.tasks.iter().map(|t| Job::Finetune(v, t.clone())));
            if m.probe.is_some() {
                jobs.push(Job::Probe(v));
            }
            if m.gender_task.is_some() {
                jobs.push(Job::Gender(v));
            }
        }
        if m.forgetting.is_some() {
            jobs.push(Job::Forgetting);
        }
        let results: Vec<Result<Ran, PipelineError>> = jobs.par_iter().map(|j| ctx.run_job(j, target)).collect();
        for (job, r) in jobs.iter().zip(results) {
            tally(&mut summary, ctx.job_key(job), r?);
        }
    }

    let results = collect_results(&ctx)?;
    let report_dir = out.join("reports");
    let warnings = emit_report(&results, &report_dir).map_err(|e| PipelineError::Stage {
        stage: "report".into(),
        source: e,
    })?;
    summary.warnings.extend(warnings);
    summary.report_dir = report_dir;
    Ok(summary)
}

fn write_manifest_copy(m: &ExperimentManifest, out: &Path) -> Result<(), PipelineError> {
    let fail = |e: StageError| PipelineError::Stage {
        stage: "setup".into(),
        source: e,
    };
    fs::create_dir_all(out).map_err(|e| fail(io_err(out)(e)))?;
    write_json(&out.join("manifest.json"), m).map_err(fail)
}

fn collect_results(ctx: &Ctx) -> Result<ExperimentResults, PipelineError> {
    let (m, root, k) = (ctx.m, ctx.root, &ctx.keys);
    let cell = |key: &StageKey| CellSource {
        stage: key.id.clone(),
        input_hash: key.hash.clone(),
        seeds: m.seeds.clone(),
    };
    let load = |key: &StageKey| -> Result<Option<PathBuf>, PipelineError> {
        Ok(key.is_complete(root).then(|| key.dir(root).join(RESULT_FILE)))
    };
    let mut rows = Vec::new();
    for &v in &m.variants {
        let (lang, vocab) = v.label(m.source.name(), m.target.name());
        let mut tasks = BTreeMap::new();
        for t in &m.tasks {
            let key = &k.finetune[&(v, t.clone())];
            if let Some(p) = load(key)? {
                let r: MultiSeedResult = read_json(&p).map_err(|e| key.fail(e))?;
                tasks.insert(t.clone(), (r, cell(key)));
            }
        }
        let probe = match k.probe.get(&v) {
            Some(key) => match load(key)? {
                Some(p) => Some((read_json(&p).map_err(|e| key.fail(e))?, cell(key))),
                None => None,
            },
            None => None,
        };
        let gender = match k.gender.get(&v) {
            Some(key) => match load(key)? {
                Some(p) => Some((read_json(&p).map_err(|e| key.fail(e))?, cell(key))),
                None => None,
            },
            None => None,
        };
        let mk = &k.models[&v];
        let loss_path = mk.dir(root).join(LOSS_FILE);
        let loss_curve = if mk.is_complete(root) {
            Some(read_loss_curve(&loss_path).map_err(|e| mk.fail(e))?)
        } else {
            None
        };
        rows.push(RowResult {
            variant: v,
            lang,
            vocab,
            tasks,
            probe,
            gender,
            loss_curve,
        });
    }
    let forgetting = match &k.forgetting {
        Some(key) => match load(key)? {
            Some(p) => Some((read_json(&p).map_err(|e| key.fail(e))?, cell(key))),
            None => None,
        },
        None => None,
    };
    Ok(ExperimentResults {
        manifest: m.clone(),
        manifest_hash: m.hash(),
        rows,
        forgetting,
        stages: k.all().into_iter().map(|s| (s.id.clone(), s.hash.clone())).collect(),
    })
}

fn read_loss_curve(path: &Path) -> Result<Vec<LossPoint>, StageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: &str| StageError::Missing(format!("{}: malformed loss row {line:?}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or_else(|| bad(l))?;
            Ok(LossPoint {
                step: s.parse().map_err(|_| bad(l))?,
                loss: v.parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}
