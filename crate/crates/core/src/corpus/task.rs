use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, CorpusError};
use crate::metrics::MetricKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleClassification,
    PairClassification,
    SingleRegression,
    PairRegression,
}

impl TaskKind {
    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::PairClassification | TaskKind::PairRegression)
    }

    pub fn is_regression(self) -> bool {
        matches!(self, TaskKind::SingleRegression | TaskKind::PairRegression)
    }

    pub fn default_metric(self) -> MetricKind {
        if self.is_regression() {
            MetricKind::Spearman
        } else {
            MetricKind::Accuracy
        }
    }
}

/// Class names (index = class id) or a closed numeric range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSpace {
    Classes(Vec<String>),
    Range { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(String),
    Value(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
}

impl Split {
    fn is_train(&self) -> bool {
        *self == Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Split::is_train")]
    pub split: Split,
}

/// Sidecar manifest describing a JSON-Lines task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub name: String,
    pub kind: TaskKind,
    pub label_space: LabelSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub label_space: LabelSpace,
    pub metric: MetricKind,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    /// Validates and assembles a dataset.
    pub fn new(manifest: TaskManifest, examples: Vec<TaskExample>) -> Result<Self, CorpusError> {
        let ds = Self {
            metric: manifest.metric.unwrap_or(manifest.kind.default_metric()),
            name: manifest.name,
            kind: manifest.kind,
            label_space: manifest.label_space,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn manifest(&self) -> TaskManifest {
        TaskManifest {
            name: self.name.clone(),
            kind: self.kind,
            label_space: self.label_space.clone(),
            metric: Some(self.metric),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |index: usize, reason: String| CorpusError::InvalidRecord {
            name: self.name.clone(),
            index,
            reason,
        };
        match (&self.label_space, self.kind.is_regression()) {
            (LabelSpace::Classes(c), false) if !c.is_empty() => {}
            (LabelSpace::Range { min, max }, true) if min < max => {}
            _ => {
                return Err(CorpusError::Manifest(format!(
                    "{}: label space {:?} does not fit kind {:?}",
                    self.name, self.label_space, self.kind
                )))
            }
        }
        let with_pair_ids = self.examples.iter().filter(|e| e.pair_id.is_some()).count();
        if self.metric == MetricKind::GenderParity && with_pair_ids == 0 {
            return Err(CorpusError::Manifest(format!("{}: gender parity needs pair_id on every example", self.name)));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            match (&self.label_space, &ex.label) {
                (LabelSpace::Classes(classes), Label::Class(c)) => {
                    if !classes.contains(c) {
                        return Err(bad(i, format!("label {c:?} not in {classes:?}")));
                    }
                }
                (LabelSpace::Range { min, max }, Label::Value(v)) => {
                    if !(v.is_finite() && *min <= *v && *v <= *max) {
                        return Err(bad(i, format!("label {v} outside [{min}, {max}]")));
                    }
                }
                (_, l) => return Err(bad(i, format!("label {l:?} has the wrong type"))),
            }
            if self.kind.is_pair() && ex.text_b.is_none() {
                return Err(bad(i, "missing text_b for a pair task".into()));
            }
            if !self.kind.is_pair() && ex.text_b.is_some() {
                return Err(bad(i, "text_b given for a single-text task".into()));
            }
            if with_pair_ids > 0 && ex.pair_id.is_none() {
                return Err(bad(i, "pair_id missing in a minimal-pair dataset".into()));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.label_space {
            LabelSpace::Classes(c) => c.len(),
            LabelSpace::Range { .. } => 1,
        }
    }

    pub fn class_index(&self, label: &Label) -> Option<usize> {
        match (&self.label_space, label) {
            (LabelSpace::Classes(c), Label::Class(l)) => c.iter().position(|x| x == l),
            _ => None,
        }
    }

    pub fn is_minimal_pair(&self) -> bool {
        self.examples.iter().any(|e| e.pair_id.is_some())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaskExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn train(&self) -> Vec<&TaskExample> {
        self.split(Split::Train).collect()
    }

    pub fn dev(&self) -> Vec<&TaskExample> {
        self.split(Split::Dev).collect()
    }
}

/// `data/sts.jsonl` -> `data/sts.manifest.json`
pub fn manifest_path_for(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{stem}.manifest.json"))
}

pub fn load_task_dataset(path: &Path) -> Result<TaskDataset, CorpusError> {
    load_task_dataset_with_manifest(path, &manifest_path_for(path))
}

pub fn load_task_dataset_with_manifest(data: &Path, manifest: &Path) -> Result<TaskDataset, CorpusError> {
    let m: TaskManifest =
        serde_json::from_slice(&fs::read(manifest).map_err(io_err(manifest))?).map_err(CorpusError::Json)?;
    let f = fs::File::open(data).map_err(io_err(data))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(data))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TaskExample = serde_json::from_str(&line).map_err(|e| CorpusError::InvalidRecord {
            name: m.name.clone(),
            index: i,
            reason: e.to_string(),
        })?;
        examples.push(ex);
    }
    TaskDataset::new(m, examples)
}

/// Writes `<dir>/<name>.jsonl` and its manifest; returns the data path.
pub fn save_task_dataset(ds: &TaskDataset, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data = dir.join(format!("{}.jsonl", ds.name));
    let mut f = fs::File::create(&data).map_err(io_err(&data))?;
    for ex in &ds.examples {
        writeln!(f, "{}", serde_json::to_string(ex)?).map_err(io_err(&data))?;
    }
    let mpath = manifest_path_for(&data);
    fs::write(&mpath, serde_json::to_string_pretty(&ds.manifest())? + "\n").map_err(io_err(&mpath))?;
    Ok(data)
}
