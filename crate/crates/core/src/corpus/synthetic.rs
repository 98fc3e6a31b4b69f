//! Seeded toy languages: a weighted head-marked CFG over a generated,
//! Zipf-distributed lexicon. Each generated sentence comes with its gold
//! dependency tree, and a family of small tasks is derived from the same
//! grammar.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    io_err, write_conllu, Corpus, CorpusError, Label, LabelSpace, ParsedSentence, Split, TaskDataset, TaskExample,
    TaskKind, TaskManifest, Treebank,
};
use crate::metrics::MetricKind;
use crate::rng::{stream, StreamRng};

const MAX_DEPTH: usize = 24;
const MAX_ATTEMPTS: usize = 10_000;
const DEV_FRACTION: f64 = 0.2;
const POLAR_WORDS: usize = 4;

/// Names of the tasks a synthetic language may derive. One is skipped
/// when the lexicon cannot support it (no pronouns for `gender_pairs`).
pub const SYNTHETIC_TASKS: [&str; 6] = ["grammaticality", "similarity", "inference", "gender_pairs", "sentiment", "wic"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryRole {
    Content,
    Function,
    Pronoun,
    Punct,
}

/// A fixed word count, or a share of the spec's `lexicon_size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySize {
    Fixed(usize),
    Share(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub upos: String,
    pub role: CategoryRole,
    pub size: CategorySize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<String>,
    /// Index into `rhs` of the head daughter.
    pub head: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub start: String,
    pub rules: Vec<Rule>,
}

impl Grammar {
    pub fn default_rules() -> Self {
        let r = |lhs: &str, rhs: &[&str], head: usize, weight: f64| Rule {
            lhs: lhs.into(),
            rhs: rhs.iter().map(|s| s.to_string()).collect(),
            head,
            weight,
        };
        Self {
            start: "S".into(),
            rules: vec![
                r("S", &["NP", "VP", "PUNCT"], 1, 1.0),
                r("NP", &["DET", "N"], 1, 0.45),
                r("NP", &["DET", "ADJ", "N"], 2, 0.25),
                r("NP", &["NP", "PP"], 0, 0.1),
                r("NP", &["PRON"], 0, 0.2),
                r("VP", &["V", "NP"], 0, 0.5),
                r("VP", &["V"], 0, 0.2),
                r("VP", &["VP", "PP"], 0, 0.1),
                r("VP", &["V", "ADJ"], 0, 0.2),
                r("PP", &["P", "NP"], 1, 1.0),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    /// Characters word forms are spelled with.
    pub alphabet: String,
    /// One punctuation word per character.
    pub punctuation: String,
    pub lexicon_size: usize,
    pub categories: Vec<CategorySpec>,
    pub grammar: Grammar,
    pub num_sentences: usize,
    /// Examples per derived task, before the train/dev split.
    pub task_examples: usize,
    pub max_sentence_words: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl SyntheticLanguageSpec {
    /// The default grammar and category inventory over the given alphabet.
    pub fn desk(name: &str, alphabet: &str, punctuation: &str, seed: u64) -> Self {
        let cat = |name: &str, upos: &str, role, size| CategorySpec {
            name: name.into(),
            upos: upos.into(),
            role,
            size,
        };
        Self {
            name: name.into(),
            alphabet: alphabet.into(),
            punctuation: punctuation.into(),
            lexicon_size: 1200,
            categories: vec![
                cat("N", "NOUN", CategoryRole::Content, CategorySize::Share(0.45)),
                cat("V", "VERB", CategoryRole::Content, CategorySize::Share(0.3)),
                cat("ADJ", "ADJ", CategoryRole::Content, CategorySize::Share(0.25)),
                cat("DET", "DET", CategoryRole::Function, CategorySize::Fixed(4)),
                cat("P", "ADP", CategoryRole::Function, CategorySize::Fixed(6)),
                cat("PRON", "PRON", CategoryRole::Pronoun, CategorySize::Fixed(4)),
                cat("PUNCT", "PUNCT", CategoryRole::Punct, CategorySize::Fixed(punctuation.chars().count())),
            ],
            grammar: Grammar::default_rules(),
            num_sentences: 4000,
            task_examples: 400,
            max_sentence_words: 30,
            zipf_exponent: 1.0,
            seed,
        }
    }

    /// Every character a surface form of this language can contain.
    pub fn characters(&self) -> BTreeSet<char> {
        self.alphabet.chars().chain(self.punctuation.chars()).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.alphabet.is_empty() || self.punctuation.is_empty() {
            return bad("alphabet and punctuation must be non-empty".into());
        }
        if self.characters().iter().any(|c| c.is_whitespace()) {
            return bad("alphabet contains whitespace".into());
        }
        let letters: HashSet<char> = self.alphabet.chars().collect();
        if self.punctuation.chars().any(|c| letters.contains(&c)) {
            return bad("punctuation overlaps the alphabet".into());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad(format!("zipf exponent {}", self.zipf_exponent));
        }
        if self.max_sentence_words == 0 {
            return bad("max_sentence_words must be positive".into());
        }
        let mut names = HashSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate category {}", c.name));
            }
            if let CategorySize::Share(s) = c.size {
                if !(s.is_finite() && s > 0.0) {
                    return bad(format!("category {} has share {s}", c.name));
                }
            }
        }
        let nonterminals: HashSet<&str> = self.grammar.rules.iter().map(|r| r.lhs.as_str()).collect();
        if let Some(clash) = nonterminals.iter().find(|n| names.contains(*n)) {
            return bad(format!("{clash} is both a category and a nonterminal"));
        }
        if !nonterminals.contains(self.grammar.start.as_str()) {
            return bad(format!("start symbol {} has no rules", self.grammar.start));
        }
        for r in &self.grammar.rules {
            if r.rhs.is_empty() || r.head >= r.rhs.len() {
                return bad(format!("rule {} -> {:?} has head {}", r.lhs, r.rhs, r.head));
            }
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return bad(format!("rule {} -> {:?} has weight {}", r.lhs, r.rhs, r.weight));
            }
            if let Some(s) = r.rhs.iter().find(|s| !names.contains(s.as_str()) && !nonterminals.contains(s.as_str()))
            {
                return bad(format!("undefined symbol {s}"));
            }
        }
        self.check_termination(&names, &nonterminals)
    }

    /// Every nonterminal must derive some finite string, and the expected
    /// derivation size must be bounded (a subcritical branching process).
    fn check_termination(&self, cats: &HashSet<&str>, nts: &HashSet<&str>) -> Result<(), CorpusError> {
        let mut productive: HashSet<&str> = cats.clone();
        loop {
            let before = productive.len();
            for r in &self.grammar.rules {
                if r.rhs.iter().all(|s| productive.contains(s.as_str())) {
                    productive.insert(r.lhs.as_str());
                }
            }
            if productive.len() == before {
                break;
            }
        }
        let mut stuck: Vec<&str> = nts.iter().copied().filter(|n| !productive.contains(n)).collect();
        stuck.sort_unstable();
        if !stuck.is_empty() {
            return Err(CorpusError::NonTerminating(format!("{stuck:?} derive no finite string")));
        }

        let mut totals: HashMap<&str, f64> = HashMap::new();
        for r in &self.grammar.rules {
            *totals.entry(r.lhs.as_str()).or_default() += r.weight;
        }
        let mut size: HashMap<&str, f64> = nts.iter().map(|n| (*n, 0.0)).collect();
        for _ in 0..5000 {
            let mut next: HashMap<&str, f64> = nts.iter().map(|n| (*n, 0.0)).collect();
            for r in &self.grammar.rules {
                let s: f64 = r.rhs.iter().map(|x| size.get(x.as_str()).copied().unwrap_or(1.0)).sum();
                *next.get_mut(r.lhs.as_str()).unwrap() += r.weight / totals[r.lhs.as_str()] * s;
            }
            size = next;
        }
        match size.iter().find(|(_, v)| !v.is_finite() || **v > 1e6) {
            Some((n, _)) => Err(CorpusError::NonTerminating(format!("expected size of {n} is unbounded"))),
            None => Ok(()),
        }
    }
}

/// Word lists per category, most frequent first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub categories: Vec<CategorySpec>,
    pub words: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn by_upos(&self, upos: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.upos == upos)
    }

    pub fn all_words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().flatten().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLanguage {
    pub corpus: Corpus,
    pub treebank: Treebank,
    pub tasks: BTreeMap<String, TaskDataset>,
    pub lexicon: Lexicon,
}

impl SyntheticLanguage {
    /// `corpus.txt`, `treebank.conllu`, `lexicon.json`, and `tasks/*.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.corpus.write(&dir.join("corpus.txt"))?;
        let tb = dir.join("treebank.conllu");
        fs::write(&tb, write_conllu(&self.treebank)).map_err(io_err(&tb))?;
        let lex = dir.join("lexicon.json");
        fs::write(&lex, serde_json::to_string_pretty(&self.lexicon)? + "\n").map_err(io_err(&lex))?;
        for ds in self.tasks.values() {
            super::save_task_dataset(ds, &dir.join("tasks"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Derivation {
    cats: Vec<usize>,
    words: Vec<usize>,
    heads: Vec<usize>,
}

struct Generator<'a> {
    spec: &'a SyntheticLanguageSpec,
    lexicon: Lexicon,
    cat_index: HashMap<&'a str, usize>,
    rules_for: HashMap<&'a str, (Vec<&'a Rule>, WeightedIndex<f64>)>,
    word_dist: Vec<WeightedIndex<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticLanguageSpec) -> Result<Self, CorpusError> {
        let lexicon = build_lexicon(spec)?;
        let cat_index = spec.categories.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();
        let mut grouped: BTreeMap<&str, Vec<&Rule>> = BTreeMap::new();
        for r in &spec.grammar.rules {
            grouped.entry(r.lhs.as_str()).or_default().push(r);
        }
        let rules_for = grouped
            .into_iter()
            .map(|(lhs, rules)| {
                let w = WeightedIndex::new(rules.iter().map(|r| r.weight)).expect("validated weights");
                (lhs, (rules, w))
            })
            .collect();
        let word_dist = lexicon
            .words
            .iter()
            .map(|ws| {
                WeightedIndex::new((0..ws.len()).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)))
                    .map_err(|e| CorpusError::InvalidSpec(format!("empty category: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec,
            lexicon,
            cat_index,
            rules_for,
            word_dist,
        })
    }

    fn expand(&self, sym: &str, depth: usize, rng: &mut StreamRng, d: &mut Derivation) -> Option<usize> {
        if let Some(&c) = self.cat_index.get(sym) {
            d.cats.push(c);
            d.words.push(self.word_dist[c].sample(rng));
            d.heads.push(usize::MAX);
            return Some(d.cats.len() - 1);
        }
        if depth >= MAX_DEPTH || d.cats.len() > self.spec.max_sentence_words {
            return None;
        }
        let (rules, dist) = &self.rules_for[sym];
        let rule = rules[dist.sample(rng)];
        let mut child_heads = Vec::with_capacity(rule.rhs.len());
        for s in &rule.rhs {
            child_heads.push(self.expand(s, depth + 1, rng, d)?);
        }
        let h = child_heads[rule.head];
        for (i, &c) in child_heads.iter().enumerate() {
            if i != rule.head {
                d.heads[c] = h + 1;
            }
        }
        Some(h)
    }

    fn sentence(&self, rng: &mut StreamRng) -> Result<Derivation, CorpusError> {
        for _ in 0..MAX_ATTEMPTS {
            let mut d = Derivation {
                cats: Vec::new(),
                words: Vec::new(),
                heads: Vec::new(),
            };
            if let Some(root) = self.expand(&self.spec.grammar.start, 0, rng, &mut d) {
                if d.cats.len() <= self.spec.max_sentence_words {
                    d.heads[root] = 0;
                    return Ok(d);
                }
            }
        }
        Err(CorpusError::NonTerminating(format!(
            "no sentence within {} words after {MAX_ATTEMPTS} attempts",
            self.spec.max_sentence_words
        )))
    }

    /// Rejection-samples a sentence satisfying `pred`; `None` if it looks unsatisfiable.
    fn sentence_where(
        &self,
        rng: &mut StreamRng,
        pred: impl Fn(&Derivation) -> bool,
    ) -> Result<Option<Derivation>, CorpusError> {
        for _ in 0..1000 {
            let d = self.sentence(rng)?;
            if pred(&d) {
                return Ok(Some(d));
            }
        }
        Ok(None)
    }

    fn text(&self, d: &Derivation) -> String {
        let words: Vec<&str> = d
            .cats
            .iter()
            .zip(&d.words)
            .map(|(&c, &w)| self.lexicon.words[c][w].as_str())
            .collect();
        words.join(" ")
    }

    fn role(&self, cat: usize) -> CategoryRole {
        self.lexicon.categories[cat].role
    }

    fn content_words(&self, d: &Derivation) -> BTreeSet<(usize, usize)> {
        d.cats
            .iter()
            .zip(&d.words)
            .filter(|(&c, _)| self.role(c) == CategoryRole::Content)
            .map(|(&c, &w)| (c, w))
            .collect()
    }

    fn other_word(&self, cat: usize, not: usize, rng: &mut StreamRng) -> usize {
        let n = self.lexicon.words[cat].len();
        loop {
            let w = self.word_dist[cat].sample(rng);
            if w != not || n == 1 {
                return w;
            }
        }
    }
}

fn build_lexicon(spec: &SyntheticLanguageSpec) -> Result<Lexicon, CorpusError> {
    let mut rng = stream(spec.seed, "lexicon", 0);
    let letters: Vec<char> = spec.alphabet.chars().collect();
    let mut seen: HashSet<String> = HashSet::new();
    let mut words = Vec::with_capacity(spec.categories.len());
    for c in &spec.categories {
        if c.role == CategoryRole::Punct {
            let ws: Vec<String> = spec.punctuation.chars().map(String::from).collect();
            words.push(ws);
            continue;
        }
        let n = match c.size {
            CategorySize::Fixed(n) => n,
            CategorySize::Share(s) => ((spec.lexicon_size as f64) * s).round() as usize,
        }
        .max(1);
        let (lo, hi) = match c.role {
            CategoryRole::Content => (3, 7),
            _ => (2, 3),
        };
        let mut ws = Vec::with_capacity(n);
        let mut attempts = 0;
        while ws.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(CorpusError::InvalidSpec(format!(
                    "alphabet too small for {n} distinct {} words",
                    c.name
                )));
            }
            let len = rng.random_range(lo..=hi);
            let w: String = (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect();
            if seen.insert(w.clone()) {
                ws.push(w);
            }
        }
        words.push(ws);
    }
    Ok(Lexicon {
        categories: spec.categories.clone(),
        words,
    })
}

/// Generates the corpus, gold treebank, derived tasks and lexicon for `spec`.
/// Output is a pure function of the spec.
pub fn gen_synthetic_language(spec: &SyntheticLanguageSpec) -> Result<SyntheticLanguage, CorpusError> {
    spec.validate()?;
    let g = Generator::new(spec)?;

    let mut rng = stream(spec.seed, "corpus", 0);
    let mut sentences = Vec::with_capacity(spec.num_sentences);
    let mut trees = Vec::with_capacity(spec.num_sentences);
    for _ in 0..spec.num_sentences {
        let d = g.sentence(&mut rng)?;
        trees.push(ParsedSentence {
            tokens: d.cats.iter().zip(&d.words).map(|(&c, &w)| g.lexicon.words[c][w].clone()).collect(),
            upos: d.cats.iter().map(|&c| g.lexicon.categories[c].upos.clone()).collect(),
            heads: d.heads.clone(),
        });
        sentences.push(g.text(&d));
    }

    let mut tasks = BTreeMap::new();
    type Builder = fn(&Generator, usize, &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError>;
    let builders: [Builder; 6] = [grammaticality, similarity, inference, gender_pairs, sentiment, wic];
    for (name, build) in SYNTHETIC_TASKS.into_iter().zip(builders) {
        let mut trng = stream(spec.seed, &format!("task:{name}"), 0);
        if let Some(ds) = build(&g, spec.task_examples, &mut trng)? {
            tasks.insert(name.to_string(), ds);
        }
    }

    Ok(SyntheticLanguage {
        corpus: Corpus {
            name: spec.name.clone(),
            sentences,
        },
        treebank: Treebank { sentences: trees },
        tasks,
        lexicon: g.lexicon,
    })
}

/// Shuffles whole units (single examples or minimal pairs) and marks the
/// trailing fifth as dev.
fn finish(
    name: &str,
    kind: TaskKind,
    label_space: LabelSpace,
    metric: MetricKind,
    mut units: Vec<Vec<TaskExample>>,
    rng: &mut StreamRng,
) -> Result<Option<TaskDataset>, CorpusError> {
    units.shuffle(rng);
    let n_train = units.len() - ((units.len() as f64) * DEV_FRACTION).round() as usize;
    let mut examples = Vec::new();
    for (i, unit) in units.into_iter().enumerate() {
        for mut ex in unit {
            ex.split = if i < n_train { Split::Train } else { Split::Dev };
            examples.push(ex);
        }
    }
    let manifest = TaskManifest {
        name: name.into(),
        kind,
        label_space,
        metric: Some(metric),
    };
    TaskDataset::new(manifest, examples).map(Some)
}

fn example(a: String, b: Option<String>, label: Label) -> TaskExample {
    TaskExample {
        text_a: a,
        text_b: b,
        label,
        pair_id: None,
        variant_tag: None,
        split: Split::Train,
    }
}

fn classes(names: &[&str]) -> LabelSpace {
    LabelSpace::Classes(names.iter().map(|s| s.to_string()).collect())
}

/// Exactly half the sentences have one adjacent pair of distinct words swapped.
fn grammaticality(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let n = n / 2 * 2;
    let mut units = Vec::with_capacity(n);
    for k in 0..n {
        let swappable = |d: &Derivation| (0..d.cats.len().saturating_sub(1)).any(|i| diff(d, i, i + 1));
        let Some(mut d) = g.sentence_where(rng, swappable)? else {
            return Ok(None);
        };
        let label = if k < n / 2 {
            let spots: Vec<usize> = (0..d.cats.len() - 1).filter(|&i| diff(&d, i, i + 1)).collect();
            let i = spots[rng.random_range(0..spots.len())];
            d.cats.swap(i, i + 1);
            d.words.swap(i, i + 1);
            "0"
        } else {
            "1"
        };
        units.push(vec![example(g.text(&d), None, Label::Class(label.into()))]);
    }
    finish(
        "grammaticality",
        TaskKind::SingleClassification,
        classes(&["0", "1"]),
        MetricKind::Matthews,
        units,
        rng,
    )
}

fn diff(d: &Derivation, i: usize, j: usize) -> bool {
    (d.cats[i], d.words[i]) != (d.cats[j], d.words[j])
}

/// Graded overlap: 5 x Jaccard similarity of the content-word sets.
fn similarity(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let mut units = Vec::with_capacity(n);
    for _ in 0..n {
        let a = g.sentence(rng)?;
        let b = if rng.random_bool(0.25) {
            g.sentence(rng)?
        } else {
            let mut b = a.clone();
            let content: Vec<usize> = (0..b.cats.len()).filter(|&i| g.role(b.cats[i]) == CategoryRole::Content).collect();
            let k = rng.random_range(0..=content.len());
            for &i in content.choose_multiple(rng, k) {
                b.words[i] = g.other_word(b.cats[i], b.words[i], rng);
            }
            b
        };
        let (ca, cb) = (g.content_words(&a), g.content_words(&b));
        let union = ca.union(&cb).count();
        let jac = if union == 0 {
            1.0
        } else {
            ca.intersection(&cb).count() as f64 / union as f64
        };
        let score = (500.0 * jac).round() / 100.0;
        units.push(vec![example(g.text(&a), Some(g.text(&b)), Label::Value(score))]);
    }
    finish(
        "similarity",
        TaskKind::PairRegression,
        LabelSpace::Range { min: 0.0, max: 5.0 },
        MetricKind::Spearman,
        units,
        rng,
    )
}

/// Entailed hypotheses drop an adjective; contradicting ones replace a
/// content word.
fn hypothesis(g: &Generator, premise: &Derivation, entail: bool, rng: &mut StreamRng) -> Derivation {
    let mut h = premise.clone();
    let adj = g.lexicon.by_upos("ADJ");
    if entail {
        let adjs: Vec<usize> = (0..h.cats.len()).filter(|&i| Some(h.cats[i]) == adj).collect();
        if let Some(&i) = adjs.choose(rng) {
            h.cats.remove(i);
            h.words.remove(i);
            h.heads.remove(i);
        }
    } else {
        let content: Vec<usize> = (0..h.cats.len()).filter(|&i| g.role(h.cats[i]) == CategoryRole::Content).collect();
        let i = content[rng.random_range(0..content.len())];
        h.words[i] = g.other_word(h.cats[i], h.words[i], rng);
    }
    h
}

fn has_content(g: &Generator, d: &Derivation) -> bool {
    d.cats.iter().any(|&c| g.role(c) == CategoryRole::Content)
}

fn inference(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let mut units = Vec::with_capacity(n);
    for k in 0..n {
        let Some(p) = g.sentence_where(rng, |d| has_content(g, d))? else {
            return Ok(None);
        };
        let entail = k % 2 == 0;
        let h = hypothesis(g, &p, entail, rng);
        let label = if entail { "entailment" } else { "not_entailment" };
        units.push(vec![example(g.text(&p), Some(g.text(&h)), Label::Class(label.into()))]);
    }
    finish(
        "inference",
        TaskKind::PairClassification,
        classes(&["entailment", "not_entailment"]),
        MetricKind::Accuracy,
        units,
        rng,
    )
}

/// Inference minimal pairs differing only in which of two pronouns is used.
fn gender_pairs(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let Some(pron) = g.lexicon.by_upos("PRON").filter(|&c| g.lexicon.words[c].len() >= 2) else {
        return Ok(None);
    };
    let mut units = Vec::with_capacity(n / 2);
    for k in 0..n / 2 {
        let Some(p) = g.sentence_where(rng, |d| d.cats.contains(&pron) && has_content(g, d))? else {
            return Ok(None);
        };
        let entail = k % 2 == 0;
        let h = hypothesis(g, &p, entail, rng);
        let label = if entail { "entailment" } else { "not_entailment" };
        let mut unit = Vec::with_capacity(2);
        for (variant, tag) in [(0usize, "m"), (1, "f")] {
            let set = |d: &Derivation| {
                let mut d = d.clone();
                for i in 0..d.cats.len() {
                    if d.cats[i] == pron {
                        d.words[i] = variant;
                    }
                }
                g.text(&d)
            };
            let mut ex = example(set(&p), Some(set(&h)), Label::Class(label.into()));
            ex.pair_id = Some(format!("p{k}"));
            ex.variant_tag = Some(tag.into());
            unit.push(ex);
        }
        units.push(unit);
    }
    finish(
        "gender_pairs",
        TaskKind::PairClassification,
        classes(&["entailment", "not_entailment"]),
        MetricKind::GenderParity,
        units,
        rng,
    )
}

/// Polarity is carried by the adjectives: the most frequent few are
/// positive, the next few negative.
fn sentiment(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let Some(adj) = g.lexicon.by_upos("ADJ").filter(|&c| g.lexicon.words[c].len() >= 2 * POLAR_WORDS) else {
        return Ok(None);
    };
    let n = n / 2 * 2;
    let mut units = Vec::with_capacity(n);
    for k in 0..n {
        let Some(mut d) = g.sentence_where(rng, |d| d.cats.contains(&adj))? else {
            return Ok(None);
        };
        let positive = k < n / 2;
        let offset = if positive { 0 } else { POLAR_WORDS };
        for i in 0..d.cats.len() {
            if d.cats[i] == adj {
                d.words[i] = offset + rng.random_range(0..POLAR_WORDS);
            }
        }
        let label = if positive { "positive" } else { "negative" };
        units.push(vec![example(g.text(&d), None, Label::Class(label.into()))]);
    }
    finish(
        "sentiment",
        TaskKind::SingleClassification,
        classes(&["negative", "positive"]),
        MetricKind::Accuracy,
        units,
        rng,
    )
}

/// The target noun's sense is the determiner right before it; two sense
/// markers are reserved and every other determiner avoids them.
fn wic(g: &Generator, n: usize, rng: &mut StreamRng) -> Result<Option<TaskDataset>, CorpusError> {
    let (Some(det), Some(noun)) = (g.lexicon.by_upos("DET"), g.lexicon.by_upos("NOUN")) else {
        return Ok(None);
    };
    let n_det = g.lexicon.words[det].len();
    if n_det < 3 {
        return Ok(None);
    }
    let n_targets = g.lexicon.words[noun].len().min(50);
    let slot = |d: &Derivation| (1..d.cats.len()).any(|i| d.cats[i] == noun && d.cats[i - 1] == det);
    let mut units = Vec::with_capacity(n);
    for k in 0..n {
        let target = rng.random_range(0..n_targets);
        let same = k % 2 == 0;
        let sa = rng.random_range(0..2);
        let sb = if same { sa } else { 1 - sa };
        let mut texts = Vec::with_capacity(2);
        for sense in [sa, sb] {
            let Some(mut d) = g.sentence_where(rng, slot)? else {
                return Ok(None);
            };
            for i in 0..d.cats.len() {
                if d.cats[i] == det {
                    d.words[i] = rng.random_range(2..n_det);
                }
            }
            let spots: Vec<usize> = (1..d.cats.len()).filter(|&i| d.cats[i] == noun && d.cats[i - 1] == det).collect();
            let i = spots[rng.random_range(0..spots.len())];
            d.words[i] = target;
            d.words[i - 1] = sense;
            texts.push(g.text(&d));
        }
        let b = texts.pop();
        let label = if same { "same" } else { "different" };
        units.push(vec![example(texts.pop().unwrap(), b, Label::Class(label.into()))]);
    }
    finish(
        "wic",
        TaskKind::PairClassification,
        classes(&["different", "same"]),
        MetricKind::Accuracy,
        units,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{check_tree, parse_conllu_str};

    fn small(name: &str, alphabet: &str, punct: &str, seed: u64) -> SyntheticLanguageSpec {
        let mut s = SyntheticLanguageSpec::desk(name, alphabet, punct, seed);
        s.num_sentences = 300;
        s.task_examples = 60;
        s.lexicon_size = 200;
        s
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small("src", "abcdefghijklm", ".", 7);
        let a = gen_synthetic_language(&spec).unwrap();
        let b = gen_synthetic_language(&spec).unwrap();
        assert_eq!(a, b);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        a.write_to(d1.path()).unwrap();
        b.write_to(d2.path()).unwrap();
        for f in ["corpus.txt", "treebank.conllu", "lexicon.json", "tasks/wic.jsonl"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = gen_synthetic_language(&small("x", "abcdefghijklm", ".", 1)).unwrap();
        let b = gen_synthetic_language(&small("x", "abcdefghijklm", ".", 2)).unwrap();
        assert_ne!(a.corpus, b.corpus);
    }

    #[test]
    fn every_sentence_has_a_valid_gold_tree() {
        let lang = gen_synthetic_language(&small("src", "abcdefghijklm", ".", 3)).unwrap();
        assert_eq!(lang.corpus.len(), lang.treebank.len());
        for (s, t) in lang.corpus.sentences.iter().zip(&lang.treebank.sentences) {
            assert_eq!(s.split(' ').collect::<Vec<_>>(), t.tokens);
            check_tree(&t.heads).unwrap();
            assert!(t.len() <= 30);
            assert_eq!(t.upos.last().unwrap(), "PUNCT");
        }
        let back = parse_conllu_str(&write_conllu(&lang.treebank)).unwrap();
        assert_eq!(back, lang.treebank);
    }

    #[test]
    fn disjoint_alphabets_share_no_word() {
        let a = gen_synthetic_language(&small("src", "abcdefghijklm", ".", 4)).unwrap();
        let b = gen_synthetic_language(&small("tgt", "nopqrstuvwxyz", "?", 4)).unwrap();
        let wa: HashSet<&str> = a.corpus.sentences.iter().flat_map(|s| s.split(' ')).collect();
        assert!(b.corpus.sentences.iter().flat_map(|s| s.split(' ')).all(|w| !wa.contains(w)));
    }

    #[test]
    fn unproductive_grammar_is_rejected() {
        let mut spec = small("x", "abc", ".", 0);
        spec.grammar.rules.retain(|r| !(r.lhs == "NP" && r.rhs.iter().all(|s| s != "NP")));
        assert!(matches!(gen_synthetic_language(&spec), Err(CorpusError::NonTerminating(_))));
    }

    #[test]
    fn supercritical_grammar_is_rejected() {
        let mut spec = small("x", "abcdefghijklm", ".", 0);
        for r in &mut spec.grammar.rules {
            if r.lhs == "NP" && r.rhs == ["NP", "PP"] {
                r.weight = 50.0;
            }
        }
        assert!(matches!(gen_synthetic_language(&spec), Err(CorpusError::NonTerminating(_))));
    }

    #[test]
    fn overlapping_punctuation_is_rejected() {
        let spec = small("x", "abc.", ".", 0);
        assert!(matches!(gen_synthetic_language(&spec), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn derived_tasks_are_well_formed() {
        let lang = gen_synthetic_language(&small("src", "abcdefghijklm", ".", 5)).unwrap();
        let names: Vec<&str> = lang.tasks.keys().map(String::as_str).collect();
        assert_eq!(
            names,
            ["gender_pairs", "grammaticality", "inference", "sentiment", "similarity", "wic"]
        );
        let gram = &lang.tasks["grammaticality"];
        let ones = gram.examples.iter().filter(|e| e.label == Label::Class("1".into())).count();
        assert_eq!(ones * 2, gram.examples.len());
        assert!(!gram.dev().is_empty() && !gram.train().is_empty());

        let gp = &lang.tasks["gender_pairs"];
        let mut by_pair: BTreeMap<&str, Vec<&TaskExample>> = BTreeMap::new();
        for e in &gp.examples {
            by_pair.entry(e.pair_id.as_deref().unwrap()).or_default().push(e);
        }
        for members in by_pair.values() {
            assert_eq!(members.len(), 2);
            assert_eq!(members[0].label, members[1].label);
            assert_eq!(members[0].split, members[1].split);
            assert_ne!(members[0].text_a, members[1].text_a);
        }

        for e in &lang.tasks["similarity"].examples {
            if e.text_a == *e.text_b.as_ref().unwrap() {
                assert_eq!(e.label, Label::Value(5.0));
            }
        }
    }
}
