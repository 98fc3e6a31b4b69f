//! Python bindings. Configs cross the boundary as JSON strings so the
//! Rust structs stay the single schema.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use forge::corpus::{gen_synthetic_language, Corpus, SyntheticLanguageSpec};
use forge::metrics::{accuracy, pearson, spearman, Confusion};
use forge::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use forge::pipeline::{run_experiment_with, ExperimentManifest, RunMode};
use forge::tokenizer::train_wordpiece;
use forge::training::{pretrain, TrainConfig};
use forge::transfer::{apply_transfer, TransferVariant};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A trained WordPiece tokenizer.
#[pyclass(module = "xfer_forge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Tokenizer {
    inner: forge::tokenizer::Tokenizer,
}

#[pymethods]
impl Tokenizer {
    #[staticmethod]
    #[pyo3(signature = (sentences, vocab_size, lowercase = false, name = "corpus"))]
    fn train(py: Python<'_>, sentences: Vec<String>, vocab_size: usize, lowercase: bool, name: &str) -> PyResult<Self> {
        let corpus = Corpus::new(name, sentences);
        let inner = py.detach(|| train_wordpiece(&corpus, vocab_size, lowercase)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        forge::tokenizer::Tokenizer::load(&dir).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[pyo3(signature = (text, text_b = None, max_len = 128))]
    fn encode(&self, text: &str, text_b: Option<&str>, max_len: usize) -> PyResult<Vec<u32>> {
        self.inner.encode(text, text_b, max_len).map(|e| e.ids).map_err(err)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tokenizer(name={:?}, size={})", self.inner.name(), self.inner.len())
    }
}

/// A checkpoint together with the tokenizer it is paired with.
#[pyclass(module = "xfer_forge", frozen)]
struct Model {
    checkpoint: Checkpoint,
    tokenizer: forge::tokenizer::Tokenizer,
}

#[pymethods]
impl Model {
    /// Fresh weights; `config` is a model config as JSON, desk-sized when
    /// omitted. The vocabulary size always follows the tokenizer.
    #[new]
    #[pyo3(signature = (tokenizer, config = None, seed = 0))]
    fn new(tokenizer: &Tokenizer, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut cfg = match config {
            Some(j) => parse::<ModelConfig>(j)?,
            None => ModelConfig::desk(),
        };
        cfg.vocab_size = tokenizer.inner.len();
        Ok(Self {
            checkpoint: init_model(&cfg, seed).map_err(err)?,
            tokenizer: tokenizer.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let l = load_checkpoint(&dir).map_err(err)?;
        Ok(Self {
            checkpoint: l.checkpoint,
            tokenizer: l.tokenizer,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.checkpoint, &self.tokenizer, &dir).map_err(err)
    }

    /// Masked-LM training on raw sentences. Returns the trained model and
    /// its `(step, loss)` curve.
    #[pyo3(signature = (sentences, config = None))]
    fn pretrain(&self, py: Python<'_>, sentences: Vec<String>, config: Option<&str>) -> PyResult<(Model, Vec<(usize, f64)>)> {
        let cfg = match config {
            Some(j) => parse::<TrainConfig>(j)?,
            None => TrainConfig::pretraining(),
        };
        let corpus = Corpus::new("python", sentences);
        let run = py.detach(|| pretrain(&self.checkpoint, &corpus, &self.tokenizer, &cfg)).map_err(err)?;
        let curve = run.loss_curve.iter().map(|p| (p.step, p.loss)).collect();
        Ok((
            Model {
                checkpoint: run.checkpoint,
                tokenizer: self.tokenizer.clone(),
            },
            curve,
        ))
    }

    /// `"swap"` re-pairs the body with `target`; `"keep"` leaves the
    /// tokenizer unchanged.
    fn transfer(&self, variant: &str, target: &Tokenizer) -> PyResult<Model> {
        let v: TransferVariant = variant.parse().map_err(|e| PyValueError::new_err(format!("{e}")))?;
        let (checkpoint, tokenizer) = apply_transfer(v, &self.checkpoint, &self.tokenizer, &target.inner).map_err(err)?;
        Ok(Model { checkpoint, tokenizer })
    }

    #[getter]
    fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            inner: self.tokenizer.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.checkpoint.num_parameters()
    }

    #[getter]
    fn lineage(&self) -> Vec<String> {
        self.checkpoint.lineage.clone()
    }

    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.checkpoint.config).map_err(err)
    }
}

/// Writes a synthetic language to `out_dir` and returns its sentences.
/// `spec` is a full language spec as JSON; otherwise the desk spec is
/// built from `name`, `alphabet` and `punctuation`.
#[pyfunction]
#[pyo3(signature = (out_dir, name = "src", alphabet = "abcdefghijklm", punctuation = ".", seed = 0, spec = None))]
fn gen_language(
    py: Python<'_>,
    out_dir: PathBuf,
    name: &str,
    alphabet: &str,
    punctuation: &str,
    seed: u64,
    spec: Option<&str>,
) -> PyResult<Vec<String>> {
    let spec = match spec {
        Some(j) => parse::<SyntheticLanguageSpec>(j)?,
        None => SyntheticLanguageSpec::desk(name, alphabet, punctuation, seed),
    };
    let lang = py.detach(|| gen_synthetic_language(&spec)).map_err(err)?;
    lang.write_to(&out_dir).map_err(err)?;
    Ok(lang.corpus.sentences)
}

/// Pearson correlation, or `None` when either side is constant.
#[pyfunction(name = "pearson")]
fn py_pearson(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    pearson(&x, &y).value()
}

/// Spearman correlation with average ranks for ties.
#[pyfunction(name = "spearman")]
fn py_spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    spearman(&x, &y).value()
}

#[pyfunction(name = "accuracy")]
fn py_accuracy(predictions: Vec<usize>, golds: Vec<usize>) -> f64 {
    accuracy(&predictions, &golds)
}

/// Binary-label Matthews correlation.
#[pyfunction]
fn matthews(predictions: Vec<usize>, golds: Vec<usize>) -> PyResult<f64> {
    Confusion::from_labels(&predictions, &golds).map(|c| c.matthews()).map_err(err)
}

/// The built-in desk experiment as JSON.
#[pyfunction]
fn desk_manifest() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentManifest::desk()).map_err(err)
}

/// Runs or resumes an experiment; `report_only` re-renders reports from
/// finished stages. Returns `(stages_run, stages_reused, warnings, report_dir)`.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, report_only = false))]
fn run_experiment(py: Python<'_>, manifest: &str, out_dir: PathBuf, report_only: bool) -> PyResult<(usize, usize, Vec<String>, PathBuf)> {
    let m: ExperimentManifest = parse(manifest)?;
    let mode = if report_only { RunMode::ReportOnly } else { RunMode::Execute };
    let s = py.detach(|| run_experiment_with(&m, &out_dir, mode)).map_err(err)?;
    Ok((s.stages_run, s.stages_skipped, s.warnings, s.report_dir))
}

#[pymodule]
fn xfer_forge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gen_language, m)?)?;
    m.add_function(wrap_pyfunction!(py_pearson, m)?)?;
    m.add_function(wrap_pyfunction!(py_spearman, m)?)?;
    m.add_function(wrap_pyfunction!(py_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(matthews, m)?)?;
    m.add_function(wrap_pyfunction!(desk_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
