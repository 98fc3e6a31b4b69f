//! Task metrics, seed aggregation, and the delta and deviation reports.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} golds")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{kind} expects {expected} outputs")]
    TypeMismatch { kind: MetricKind, expected: &'static str },
    #[error("binary metric got class {0}")]
    NotBinary(usize),
    #[error("pair_id {0:?} appears {1} time(s), expected 2")]
    Unpaired(String, usize),
    #[error("task {task:?} missing from {side}")]
    MissingTask { task: String, side: String },
    #[error("group {0:?} has fewer than two models")]
    SmallGroup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1Binary,
    Matthews,
    Pearson,
    Spearman,
    GenderParity,
}

impl MetricKind {
    pub fn is_correlation(self) -> bool {
        matches!(self, MetricKind::Matthews | MetricKind::Pearson | MetricKind::Spearman)
    }

    pub fn wants_values(self) -> bool {
        matches!(self, MetricKind::Pearson | MetricKind::Spearman)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1Binary => "f1_binary",
            MetricKind::Matthews => "matthews",
            MetricKind::Pearson => "pearson",
            MetricKind::Spearman => "spearman",
            MetricKind::GenderParity => "gender_parity",
        };
        f.write_str(s)
    }
}

/// A metric value, or the explicit marker for a zero-variance correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Defined(f64),
    Undefined,
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Defined(v) => Some(v),
            Score::Undefined => None,
        }
    }
}

/// Model outputs or gold labels: class ids or real values.
#[derive(Clone, Copy, Debug)]
pub enum Outputs<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl Outputs<'_> {
    fn len(&self) -> usize {
        match self {
            Outputs::Classes(c) => c.len(),
            Outputs::Values(v) => v.len(),
        }
    }
}

pub fn compute_metric(kind: MetricKind, predictions: Outputs, golds: Outputs) -> Result<Score, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), golds.len()));
    }
    if predictions.len() == 0 {
        return Err(MetricsError::Empty);
    }
    let classes = || MetricsError::TypeMismatch {
        kind,
        expected: "class",
    };
    let values = || MetricsError::TypeMismatch {
        kind,
        expected: "real-valued",
    };
    match kind {
        MetricKind::Accuracy => match (predictions, golds) {
            (Outputs::Classes(p), Outputs::Classes(g)) => Ok(Score::Defined(accuracy(p, g))),
            _ => Err(classes()),
        },
        MetricKind::F1Binary | MetricKind::Matthews => match (predictions, golds) {
            (Outputs::Classes(p), Outputs::Classes(g)) => {
                let c = Confusion::from_labels(p, g)?;
                Ok(Score::Defined(if kind == MetricKind::Matthews {
                    c.matthews()
                } else {
                    c.f1()
                }))
            }
            _ => Err(classes()),
        },
        MetricKind::Pearson | MetricKind::Spearman => match (predictions, golds) {
            (Outputs::Values(p), Outputs::Values(g)) => Ok(if kind == MetricKind::Pearson {
                pearson(p, g)
            } else {
                spearman(p, g)
            }),
            _ => Err(values()),
        },
        MetricKind::GenderParity => Err(MetricsError::TypeMismatch {
            kind,
            expected: "paired (use gender_parity)",
        }),
    }
}

pub fn accuracy(p: &[usize], g: &[usize]) -> f64 {
    p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// Binary confusion counts; class 1 is positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_labels(p: &[usize], g: &[usize]) -> Result<Self, MetricsError> {
        let mut c = Confusion::default();
        for (&a, &b) in p.iter().zip(g) {
            match (a, b) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                (x, y) => return Err(MetricsError::NotBinary(x.max(y))),
            }
        }
        Ok(c)
    }

    pub fn matthews(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.iter().any(|&f| f == 0.0) {
            return 0.0;
        }
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    }

    pub fn f1(&self) -> f64 {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Score {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Score::Undefined;
    }
    Score::Defined((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Score {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenderParity {
    /// Percentage of pairs whose two predictions agree.
    pub gps: f64,
    /// Percentage of examples predicted correctly.
    pub accuracy: f64,
}

pub fn gender_parity(predictions: &[usize], golds: &[usize], pair_ids: &[String]) -> Result<GenderParity, MetricsError> {
    if predictions.len() != golds.len() || predictions.len() != pair_ids.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), golds.len().min(pair_ids.len())));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut pairs: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in pair_ids.iter().enumerate() {
        pairs.entry(id.as_str()).or_default().push(i);
    }
    let mut equal = 0usize;
    for (id, members) in &pairs {
        if members.len() != 2 {
            return Err(MetricsError::Unpaired(id.to_string(), members.len()));
        }
        if predictions[members[0]] == predictions[members[1]] {
            equal += 1;
        }
    }
    Ok(GenderParity {
        gps: 100.0 * equal as f64 / pairs.len() as f64,
        accuracy: 100.0 * accuracy(predictions, golds),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single value.
    pub stdev: Option<f64>,
    pub values: Vec<f64>,
}

impl Aggregate {
    /// `mean ± stdev` at two decimals, `n/a` for an undefined stdev.
    pub fn display(&self) -> String {
        match self.stdev {
            Some(s) => format!("{:.2} ± {:.2}", self.mean, s),
            None => format!("{:.2} ± n/a", self.mean),
        }
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(Aggregate {
        mean,
        stdev,
        values: values.to_vec(),
    })
}

pub type TaskScores = BTreeMap<String, f64>;

/// Two tasks reported as one (matched and mismatched inference sets).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPair {
    pub name: String,
    pub first: String,
    pub second: String,
}

/// Merges every pair into its averaged score; other tasks pass through.
pub fn merge_pairs(scores: &TaskScores, pairs: &[TaskPair]) -> TaskScores {
    let mut out = scores.clone();
    for p in pairs {
        if let (Some(a), Some(b)) = (scores.get(&p.first), scores.get(&p.second)) {
            out.remove(&p.first);
            out.remove(&p.second);
            out.insert(p.name.clone(), (a + b) / 2.0);
        }
    }
    out
}

/// How a table's AVG column treats paired tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgConvention {
    /// Plain mean over every printed column, each pair member counted once.
    #[default]
    FlatColumns,
    /// Average each pair to one score, then take the mean.
    PairsFirst,
}

pub fn table_average(scores: &TaskScores, pairs: &[TaskPair], convention: AvgConvention) -> Result<f64, MetricsError> {
    let s = match convention {
        AvgConvention::FlatColumns => scores.clone(),
        AvgConvention::PairsFirst => merge_pairs(scores, pairs),
    };
    if s.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(s.values().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxDelta {
    pub delta: f64,
    pub variant: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// variant -> task -> score minus baseline score
    pub per_variant: BTreeMap<String, TaskScores>,
    /// task -> best delta across variants; ties keep the first variant by name
    pub max: BTreeMap<String, MaxDelta>,
}

/// Per-task differences of each transferred variant from the baseline,
/// with paired tasks averaged before differencing.
pub fn delta_report(
    variants: &BTreeMap<String, TaskScores>,
    baseline: &TaskScores,
    pairs: &[TaskPair],
) -> Result<DeltaReport, MetricsError> {
    if variants.is_empty() {
        return Err(MetricsError::Empty);
    }
    let base = merge_pairs(baseline, pairs);
    let mut per_variant = BTreeMap::new();
    for (v, scores) in variants {
        for t in baseline.keys() {
            if !scores.contains_key(t) {
                return Err(MetricsError::MissingTask {
                    task: t.clone(),
                    side: v.clone(),
                });
            }
        }
        let merged = merge_pairs(scores, pairs);
        let mut deltas = TaskScores::new();
        for (t, s) in &merged {
            let b = base.get(t).ok_or_else(|| MetricsError::MissingTask {
                task: t.clone(),
                side: "baseline".into(),
            })?;
            deltas.insert(t.clone(), s - b);
        }
        per_variant.insert(v.clone(), deltas);
    }
    let mut max: BTreeMap<String, MaxDelta> = BTreeMap::new();
    for (v, deltas) in &per_variant {
        for (t, &d) in deltas {
            match max.get(t) {
                Some(m) if m.delta >= d => {}
                _ => {
                    max.insert(
                        t.clone(),
                        MaxDelta {
                            delta: d,
                            variant: v.clone(),
                        },
                    );
                }
            }
        }
    }
    Ok(DeltaReport { per_variant, max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub task: String,
    pub group: String,
    pub model: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub task: String,
    pub group: String,
    pub model: String,
    pub deviation: f64,
}

/// Deviation of each model's score from the mean of its (task, group).
/// Output follows input order.
pub fn average_difference_report(scores: &[GroupScore]) -> Result<Vec<Deviation>, MetricsError> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for s in scores {
        groups.entry((&s.task, &s.group)).or_default().push(s.score);
    }
    let mut means = BTreeMap::new();
    for (k, v) in &groups {
        if v.len() < 2 {
            return Err(MetricsError::SmallGroup(format!("{}/{}", k.0, k.1)));
        }
        means.insert(*k, v.iter().sum::<f64>() / v.len() as f64);
    }
    Ok(scores
        .iter()
        .map(|s| Deviation {
            task: s.task.clone(),
            group: s.group.clone(),
            model: s.model.clone(),
            deviation: s.score - means[&(s.task.as_str(), s.group.as_str())],
        })
        .collect())
}

pub const MISSING_CELL: &str = "\u{2014}";

/// Two-decimal table cell; `None` renders as the missing-cell marker.
pub fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => MISSING_CELL.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: &[usize]) -> Outputs<'_> {
        Outputs::Classes(x)
    }

    fn v(x: &[f64]) -> Outputs<'_> {
        Outputs::Values(x)
    }

    #[test]
    fn perfect_binary_predictions() {
        let g = [0, 1, 1, 0, 1];
        for k in [MetricKind::Accuracy, MetricKind::F1Binary, MetricKind::Matthews] {
            assert_eq!(compute_metric(k, c(&g), c(&g)).unwrap(), Score::Defined(1.0));
        }
    }

    #[test]
    fn matthews_closed_form() {
        // TP=2 FP=1 FN=1 TN=2
        let p = [1, 1, 1, 0, 0, 0];
        let g = [1, 1, 0, 1, 0, 0];
        let m = compute_metric(MetricKind::Matthews, c(&p), c(&g)).unwrap().value().unwrap();
        let oracle = (2.0 * 2.0 - 1.0 * 1.0) / ((3.0f64) * 3.0 * 3.0 * 3.0).sqrt();
        assert!((m - oracle).abs() < 1e-15);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_binary_metrics_are_zero() {
        let m = compute_metric(MetricKind::Matthews, c(&[1, 1]), c(&[0, 1])).unwrap();
        assert_eq!(m, Score::Defined(0.0));
        let f = compute_metric(MetricKind::F1Binary, c(&[0, 0]), c(&[0, 0])).unwrap();
        assert_eq!(f, Score::Defined(0.0));
    }

    #[test]
    fn spearman_of_reversal_is_minus_one() {
        let s = compute_metric(MetricKind::Spearman, v(&[3.0, 2.0, 1.0]), v(&[1.0, 2.0, 3.0])).unwrap();
        assert!((s.value().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_correlation_is_undefined() {
        let s = compute_metric(MetricKind::Pearson, v(&[1.0, 1.0]), v(&[1.0, 2.0])).unwrap();
        assert_eq!(s, Score::Undefined);
    }

    #[test]
    fn type_and_length_errors() {
        assert!(matches!(
            compute_metric(MetricKind::Accuracy, c(&[1]), c(&[1, 0])),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            compute_metric(MetricKind::Pearson, c(&[1]), c(&[1])),
            Err(MetricsError::TypeMismatch { .. })
        ));
        assert!(matches!(
            compute_metric(MetricKind::Matthews, c(&[2]), c(&[1])),
            Err(MetricsError::NotBinary(2))
        ));
        assert!(matches!(compute_metric(MetricKind::Accuracy, c(&[]), c(&[])), Err(MetricsError::Empty)));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{}", i / 2)).collect()
    }

    #[test]
    fn constant_predictor_on_balanced_pairs() {
        // golds alternate across pairs, equal within pairs
        let golds: Vec<usize> = (0..8).map(|i| (i / 2) % 2).collect();
        let gp = gender_parity(&[0; 8], &golds, &ids(8)).unwrap();
        assert_eq!(format!("{:.2} {:.2}", gp.gps, gp.accuracy), "100.00 50.00");
    }

    #[test]
    fn one_disagreeing_pair_of_four() {
        let preds = [0, 0, 1, 1, 0, 1, 1, 1];
        let gp = gender_parity(&preds, &[0; 8], &ids(8)).unwrap();
        assert_eq!(gp.gps, 75.0);
    }

    #[test]
    fn golds_differing_within_pairs() {
        let golds = [0, 1, 1, 0, 0, 1];
        let gp = gender_parity(&golds, &golds, &ids(6)).unwrap();
        assert_eq!((gp.gps, gp.accuracy), (0.0, 100.0));
    }

    #[test]
    fn unpaired_id_is_rejected() {
        let ids = vec!["a".to_string(), "a".into(), "b".into()];
        assert!(matches!(gender_parity(&[0, 0, 0], &[0, 0, 0], &ids), Err(MetricsError::Unpaired(..))));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((a.mean, a.stdev), (5.0, Some(0.0)));
        let a = aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(a.mean, 3.0);
        assert!((a.stdev.unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        let a = aggregate(&[7.0]).unwrap();
        assert_eq!(a.display(), "7.00 ± n/a");
        assert!(aggregate(&[]).is_err());
    }

    fn scores(items: &[(&str, f64)]) -> TaskScores {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn delta_takes_max_over_variants() {
        let base = scores(&[("t", 50.0)]);
        let mut variants = BTreeMap::new();
        variants.insert("a".to_string(), scores(&[("t", 52.0)]));
        variants.insert("b".to_string(), scores(&[("t", 49.0)]));
        let r = delta_report(&variants, &base, &[]).unwrap();
        assert_eq!(r.max["t"].delta, 2.0);
        assert_eq!(r.max["t"].variant, "a");
        assert_eq!(r.per_variant["b"]["t"], -1.0);
    }

    #[test]
    fn delta_of_model_against_itself_is_zero() {
        let base = scores(&[("x", 1.0), ("m", 3.0), ("mm", 5.0)]);
        let pairs = [TaskPair {
            name: "mnli".into(),
            first: "m".into(),
            second: "mm".into(),
        }];
        let mut variants = BTreeMap::new();
        variants.insert("self".to_string(), base.clone());
        let r = delta_report(&variants, &base, &pairs).unwrap();
        assert!(r.per_variant["self"].values().all(|&d| d == 0.0));
        assert_eq!(r.per_variant["self"].keys().collect::<Vec<_>>(), ["mnli", "x"]);
    }

    #[test]
    fn delta_missing_task() {
        let base = scores(&[("x", 1.0), ("y", 2.0)]);
        let mut variants = BTreeMap::new();
        variants.insert("v".to_string(), scores(&[("x", 1.0)]));
        assert!(matches!(
            delta_report(&variants, &base, &[]),
            Err(MetricsError::MissingTask { .. })
        ));
    }

    fn gs(task: &str, model: &str, score: f64) -> GroupScore {
        GroupScore {
            task: task.into(),
            group: "g".into(),
            model: model.into(),
            score,
        }
    }

    #[test]
    fn deviation_from_group_mean() {
        let d = average_difference_report(&[gs("t", "a", 90.0), gs("t", "b", 94.0), gs("t", "c", 95.0)]).unwrap();
        let devs: Vec<f64> = d.iter().map(|x| x.deviation).collect();
        assert_eq!(devs, vec![-3.0, 1.0, 2.0]);
        assert!(average_difference_report(&[gs("t", "a", 1.0)]).is_err());
    }

    fn bin_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| (proptest::collection::vec(0usize..2, n), proptest::collection::vec(0usize..2, n)))
    }

    fn real_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
                proptest::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn bounded_metrics_stay_in_range((p, g) in bin_pair()) {
            let acc = compute_metric(MetricKind::Accuracy, c(&p), c(&g)).unwrap().value().unwrap();
            let f1 = compute_metric(MetricKind::F1Binary, c(&p), c(&g)).unwrap().value().unwrap();
            let mcc = compute_metric(MetricKind::Matthews, c(&p), c(&g)).unwrap().value().unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((0.0..=1.0).contains(&f1));
            prop_assert!((-1.0..=1.0).contains(&mcc));
        }

        #[test]
        fn matthews_is_symmetric_under_label_swap((p, g) in bin_pair()) {
            let flip = |x: &[usize]| x.iter().map(|&v| 1 - v).collect::<Vec<_>>();
            let a = compute_metric(MetricKind::Matthews, c(&p), c(&g)).unwrap().value().unwrap();
            let b = compute_metric(MetricKind::Matthews, c(&flip(&p)), c(&flip(&g))).unwrap().value().unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn spearman_ignores_monotone_transforms((x, y) in real_pair()) {
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let ty: Vec<f64> = y.iter().map(|v| v.exp().ln_1p()).collect();
            let a = spearman(&x, &y);
            let b = spearman(&tx, &ty);
            match (a, b) {
                (Score::Defined(a), Score::Defined(b)) => {
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn gps_ignores_relabeling(preds in proptest::collection::vec(0usize..3, 1..20)) {
            let p: Vec<usize> = preds.iter().flat_map(|&x| [x, (x * 7 + 1) % 3]).collect();
            let ids = ids(p.len());
            let golds = vec![0; p.len()];
            let relabeled: Vec<usize> = p.iter().map(|&x| [2, 0, 1][x]).collect();
            let a = gender_parity(&p, &golds, &ids).unwrap().gps;
            let b = gender_parity(&relabeled, &golds, &ids).unwrap().gps;
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=100.0).contains(&a));
        }

        #[test]
        fn deviations_sum_to_zero(xs in proptest::collection::vec(-100.0f64..100.0, 2..10)) {
            let rows: Vec<GroupScore> = xs.iter().enumerate().map(|(i, &s)| gs("t", &i.to_string(), s)).collect();
            let total: f64 = average_difference_report(&rows).unwrap().iter().map(|d| d.deviation).sum();
            prop_assert!(total.abs() < 1e-9);
        }
    }
}
