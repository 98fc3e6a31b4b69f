//! Text corpora, treebanks, task datasets, and seeded synthetic languages.

mod conllu;
mod synthetic;
mod task;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use conllu::{check_tree, parse_conllu, parse_conllu_str, write_conllu, ParsedSentence, Treebank};
pub use synthetic::{
    gen_synthetic_language, CategoryRole, CategorySize, CategorySpec, Grammar, Lexicon, Rule, SyntheticLanguage,
    SyntheticLanguageSpec, SYNTHETIC_TASKS,
};
pub use task::{
    load_task_dataset, load_task_dataset_with_manifest, manifest_path_for, save_task_dataset, Label, LabelSpace,
    Split, TaskDataset, TaskExample, TaskKind, TaskManifest,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 on line {line}")]
    Utf8 { path: PathBuf, line: usize },
    #[error("line {line}: HEAD column {value:?} is not an integer")]
    NonIntegerHead { line: usize, value: String },
    #[error("line {line}: malformed CoNLL-U token line ({reason})")]
    MalformedLine { line: usize, reason: String },
    #[error("sentence {index}: {reason}")]
    InvalidTree { index: usize, reason: String },
    #[error("task dataset {name}: record {index}: {reason}")]
    InvalidRecord { name: String, index: usize, reason: String },
    #[error("task manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid synthetic language spec: {0}")]
    InvalidSpec(String),
    #[error("grammar does not terminate: {0}")]
    NonTerminating(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ordered, non-empty, whitespace-normalized sentences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub sentences: Vec<String>,
}

impl Corpus {
    /// Builds a corpus, normalizing whitespace and dropping blank sentences.
    pub fn new(name: impl Into<String>, sentences: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        Self {
            name: name.into(),
            sentences: sentences
                .into_iter()
                .map(|s| normalize_whitespace(s.as_ref()))
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        for s in &self.sentences {
            writeln!(f, "{s}").map_err(io_err(path))?;
        }
        Ok(())
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads one sentence per line. Lines are trimmed and blank lines dropped;
/// invalid UTF-8 is reported with its 1-based line number.
pub fn read_text_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut sentences = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|_| CorpusError::Utf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        let s = normalize_whitespace(line);
        if !s.is_empty() {
            sentences.push(s);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus { name, sentences })
}
