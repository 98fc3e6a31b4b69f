use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use xfer_forge::corpus::{gen_synthetic_language, load_task_dataset, parse_conllu, read_text_corpus, SyntheticLanguageSpec};
use xfer_forge::forgetting::{eval_bidirectional, mlm_perplexity, BidirectionalEvalPlan, RosterEntry};
use xfer_forge::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig};
use xfer_forge::pipeline::{run_experiment_with, ExperimentManifest, RunMode};
use xfer_forge::probing::{probe_structural, wic_probe, ProbeConfig};
use xfer_forge::tokenizer::{train_wordpiece, Tokenizer, Vocabulary, CONFIG_FILE, VOCAB_FILE};
use xfer_forge::training::{finetune, multi_seed_finetune, pretrain, write_loss_curve, TrainConfig};
use xfer_forge::transfer::{apply_transfer, TransferVariant};

#[derive(Parser)]
#[command(name = "xfer-forge", version, about = "Vocabulary-swap transfer experiments for small masked language models")]
struct Cli {
    /// Seed override for the command's main random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (or file, for single-result commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic language: corpus, treebank and tasks.
    GenCorpus {
        /// Synthetic language spec (JSON).
        #[arg(long, conflicts_with = "desk")]
        spec: Option<PathBuf>,
        /// Use the built-in desk spec with this name.
        #[arg(long)]
        desk: Option<String>,
        #[arg(long, default_value = "abcdefghijklm", requires = "desk")]
        alphabet: String,
        #[arg(long, default_value = ".", requires = "desk")]
        punctuation: String,
    },
    /// Train a WordPiece tokenizer on a text corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2000)]
        vocab_size: usize,
        #[arg(long)]
        lowercase: bool,
        /// Vocabulary name (defaults to the corpus file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Masked-LM pre-training, from scratch or continuing a checkpoint.
    Pretrain {
        /// Training config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long, conflicts_with_all = ["tokenizer", "model"])]
        checkpoint: Option<PathBuf>,
        /// Tokenizer directory, for a fresh model.
        #[arg(long, requires = "model")]
        tokenizer: Option<PathBuf>,
        /// Model config (JSON), for a fresh model; vocab size follows the tokenizer.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Apply SWAP or KEEP to a checkpoint.
    Transfer {
        #[arg(long)]
        variant: TransferVariant,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target vocab file or tokenizer directory.
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Fine-tune on a task; several seeds give an aggregate.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-Lines task file with its manifest alongside.
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated seed list; overrides --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train and score a structural distance probe.
    ProbeStructural {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        treebank: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Multi-seed pair fine-tuning on a WiC-style dataset.
    ProbeWic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Number of seeds, counting up from --seed (default 1).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Source- and target-task scores for a roster of transferred models.
    EvalForgetting {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Run or resume a full experiment.
    RunExperiment(ManifestArgs),
    /// Re-render reports from finished stages without computing anything.
    Report(ManifestArgs),
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long, conflicts_with = "desk", required_unless_present = "desk")]
    manifest: Option<PathBuf>,
    /// Use the built-in desk manifest.
    #[arg(long)]
    desk: bool,
}

/// On-disk form of a forgetting evaluation.
#[derive(Debug, Deserialize)]
struct PlanFile {
    group: String,
    source_task: PathBuf,
    target_task: PathBuf,
    roster: Vec<PlanEntry>,
    seeds: Vec<u64>,
    #[serde(default = "TrainConfig::finetuning")]
    train: TrainConfig,
    #[serde(default)]
    perplexity: Option<PlanPerplexity>,
}

#[derive(Debug, Deserialize)]
struct PlanEntry {
    name: String,
    checkpoint: PathBuf,
    /// Defaults to the tokenizer saved with the checkpoint.
    #[serde(default)]
    tokenizer: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct PlanPerplexity {
    corpus: PathBuf,
    #[serde(default)]
    mask_seed: u64,
    #[serde(default = "default_ppl_len")]
    max_seq_len: usize,
}

fn default_ppl_len() -> usize {
    128
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(p) = out {
        write_json(p, value)?;
    }
    Ok(())
}

/// A tokenizer directory, or a vocab file. A `vocab.txt` next to a
/// `tokenizer.json` loads as that directory; any other file gets the
/// default cased config.
fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let dir = if path.is_dir() {
        Some(path)
    } else {
        path.parent().filter(|d| path.file_name().is_some_and(|f| f == VOCAB_FILE) && d.join(CONFIG_FILE).exists())
    };
    match dir {
        Some(d) => Tokenizer::load(d).with_context(|| format!("loading tokenizer {}", d.display())),
        None => Ok(Tokenizer::new(Vocabulary::load(path)?, false)),
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.context("--out is required for this command")
}

fn load_manifest(args: &ManifestArgs) -> Result<ExperimentManifest> {
    match &args.manifest {
        Some(p) => read_config(p),
        None => Ok(ExperimentManifest::desk()),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenCorpus {
            spec,
            desk,
            alphabet,
            punctuation,
        } => {
            let mut spec: SyntheticLanguageSpec = match (spec, desk) {
                (Some(p), _) => read_config(&p)?,
                (None, Some(name)) => SyntheticLanguageSpec::desk(&name, &alphabet, &punctuation, 0),
                (None, None) => bail!("pass --spec FILE or --desk NAME"),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let lang = gen_synthetic_language(&spec)?;
            let dir = require_out(out)?;
            lang.write_to(dir)?;
            write_json(&dir.join("spec.json"), &spec)?;
            eprintln!(
                "wrote {} sentences, {} trees and {} tasks to {}",
                lang.corpus.len(),
                lang.treebank.len(),
                lang.tasks.len(),
                dir.display()
            );
        }
        Command::TrainTokenizer {
            corpus,
            vocab_size,
            lowercase,
            name,
        } => {
            let mut c = read_text_corpus(&corpus)?;
            if let Some(n) = name {
                c.name = n;
            }
            let tok = train_wordpiece(&c, vocab_size, lowercase)?;
            let dir = require_out(out)?;
            tok.save(dir)?;
            eprintln!("vocabulary {:?} with {} tokens written to {}", tok.name(), tok.len(), dir.display());
        }
        Command::Pretrain {
            config,
            corpus,
            checkpoint,
            tokenizer,
            model,
        } => {
            let mut cfg = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::pretraining(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let (ck, tok) = match (checkpoint, tokenizer, model) {
                (Some(dir), _, _) => {
                    let l = load_checkpoint(&dir)?;
                    (l.checkpoint, l.tokenizer)
                }
                (None, Some(t), Some(m)) => {
                    let tok = load_tokenizer(&t)?;
                    let mut mc: ModelConfig = read_config(&m)?;
                    mc.vocab_size = tok.len();
                    (init_model(&mc, cfg.seed)?, tok)
                }
                _ => bail!("pass --checkpoint DIR, or --tokenizer DIR with --model FILE"),
            };
            let c = read_text_corpus(&corpus)?;
            let run = pretrain(&ck, &c, &tok, &cfg)?;
            let dir = require_out(out)?;
            save_checkpoint(&run.checkpoint, &tok, dir)?;
            write_loss_curve(&run.loss_curve, &dir.join("loss.csv"))?;
            let last = run.loss_curve.last().map_or(f64::NAN, |p| p.loss);
            eprintln!("{} steps, final loss {last:.4}; checkpoint in {}", run.loss_curve.len(), dir.display());
        }
        Command::Transfer {
            variant,
            checkpoint,
            vocab,
        } => {
            let l = load_checkpoint(&checkpoint)?;
            let target = load_tokenizer(&vocab)?;
            let (ck, tok) = apply_transfer(variant, &l.checkpoint, &l.tokenizer, &target)?;
            let dir = require_out(out)?;
            save_checkpoint(&ck, &tok, dir)?;
            eprintln!("{variant:?} checkpoint paired with {:?} written to {}", tok.name(), dir.display());
        }
        Command::Finetune {
            config,
            checkpoint,
            dataset,
            seeds,
        } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::finetuning(),
            };
            let l = load_checkpoint(&checkpoint)?;
            let ds = load_task_dataset(&dataset)?;
            if seeds.len() > 1 {
                let r = multi_seed_finetune(&l.checkpoint, &l.tokenizer, &ds, &cfg, &seeds, true)?;
                eprintln!("{} {}: {}", ds.name, r.metric, r.aggregate.display());
                emit(out.map(|d| d.join("result.json")).as_deref(), &r)?;
            } else {
                let seed = seeds.first().copied().or(cli.seed).unwrap_or(cfg.seed);
                let r = finetune(&l.checkpoint, &l.tokenizer, &ds, &cfg, seed)?;
                if let Some(dir) = out {
                    fs::create_dir_all(dir)?;
                    write_loss_curve(&r.loss_curve, &dir.join("loss.csv"))?;
                }
                emit(out.map(|d| d.join("result.json")).as_deref(), &BTreeMap::from([("seed", serde_json::json!(seed)), ("dev", serde_json::to_value(&r.dev)?)]))?;
            }
        }
        Command::ProbeStructural {
            checkpoint,
            treebank,
            layer,
            rank,
            steps,
        } => {
            let l = load_checkpoint(&checkpoint)?;
            let tb = parse_conllu(&treebank)?;
            let mut cfg = ProbeConfig {
                layer,
                rank,
                ..ProbeConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let report = probe_structural(&l.checkpoint, &l.tokenizer, &tb, &cfg)?;
            emit(out, &report)?;
        }
        Command::ProbeWic {
            checkpoint,
            dataset,
            seeds,
            config,
        } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::finetuning(),
            };
            let base = cli.seed.unwrap_or(1);
            let seeds: Vec<u64> = (base..base + seeds).collect();
            let l = load_checkpoint(&checkpoint)?;
            let ds = load_task_dataset(&dataset)?;
            let r = wic_probe(&l.checkpoint, &l.tokenizer, &ds, &cfg, &seeds)?;
            eprintln!("{}: {}", ds.name, r.aggregate.display());
            emit(out, &r)?;
        }
        Command::EvalForgetting { plan } => {
            let p: PlanFile = read_config(&plan)?;
            let mut roster = Vec::new();
            for e in &p.roster {
                let l = load_checkpoint(&e.checkpoint)?;
                let tokenizer = match &e.tokenizer {
                    Some(t) => load_tokenizer(t)?,
                    None => l.tokenizer,
                };
                roster.push(RosterEntry {
                    name: e.name.clone(),
                    checkpoint: l.checkpoint,
                    tokenizer,
                });
            }
            let plan = BidirectionalEvalPlan {
                group: p.group,
                source_task: load_task_dataset(&p.source_task)?,
                target_task: load_task_dataset(&p.target_task)?,
                roster,
                seeds: p.seeds,
                train: p.train,
            };
            let report = eval_bidirectional(&plan)?;
            let dir = require_out(out)?;
            fs::create_dir_all(dir)?;
            let mut table = format!("model,{},{}\n", plan.source_task.name, plan.target_task.name);
            for e in &plan.roster {
                let cell = |task: &str| {
                    report
                        .scores
                        .iter()
                        .find(|s| s.model == e.name && s.task == task)
                        .map_or("\u{2014}".to_string(), |s| format!("{:.2}", 100.0 * s.aggregate.mean))
                };
                table += &format!("{},{},{}\n", e.name, cell(&plan.source_task.name), cell(&plan.target_task.name));
            }
            fs::write(dir.join("scores.csv"), &table)?;
            let mut dev = String::from("task,group,model,deviation\n");
            for d in &report.deviations {
                dev += &format!("{},{},{},{:.2}\n", d.task, d.group, d.model, 100.0 * d.deviation);
            }
            fs::write(dir.join("deviation.csv"), &dev)?;
            if let Some(pp) = &p.perplexity {
                let corpus = read_text_corpus(&pp.corpus)?;
                let mut rows = String::from("model,perplexity\n");
                for e in &plan.roster {
                    let r = mlm_perplexity(&e.checkpoint, &corpus, &e.tokenizer, pp.mask_seed, pp.max_seq_len)?;
                    rows += &format!("{},{:.2}\n", e.name, r.perplexity);
                }
                fs::write(dir.join("perplexity.csv"), &rows)?;
            }
            write_json(&dir.join("report.json"), &report)?;
            print!("{table}");
        }
        Command::RunExperiment(args) => experiment(&cli_seeded(load_manifest(&args)?, cli.seed), out, RunMode::Execute)?,
        Command::Report(args) => experiment(&cli_seeded(load_manifest(&args)?, cli.seed), out, RunMode::ReportOnly)?,
    }
    Ok(())
}

fn cli_seeded(mut m: ExperimentManifest, seed: Option<u64>) -> ExperimentManifest {
    if let Some(s) = seed {
        m.seed = s;
    }
    m
}

fn experiment(m: &ExperimentManifest, out: Option<&Path>, mode: RunMode) -> Result<()> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| m.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&m.name));
    let summary = run_experiment_with(m, &dir, mode)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "{} stages run, {} reused; reports in {}",
        summary.stages_run,
        summary.stages_skipped,
        summary.report_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
