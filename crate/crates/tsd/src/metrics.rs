//! Generalization, fidelity, and aggregation metrics.
//!
//! Ranking metrics follow the textbook definitions so they can be checked
//! against brute-force oracles term by term: average precision uses the
//! step-wise summation over distinct thresholds, AUC-ROC the Mann-Whitney
//! rank statistic with averaged ties, both macro-averaged one-vs-rest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::tensor::kl_divergence;

/// Tolerance for the row-stochastic check on probability inputs.
const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no class had both positives and negatives")]
    NoEvaluableClass,
    #[error("missing value for method {method:?}, dataset {dataset:?}, metric {metric:?}")]
    MissingCell { method: String, dataset: String, metric: String },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

fn check_probs(probs: &[f64], num_classes: usize, rows: usize) -> Result<(), MetricError> {
    if num_classes < 2 {
        return Err(MetricError::InvalidArgument("need at least two classes".into()));
    }
    if rows == 0 {
        return Err(MetricError::InvalidArgument("empty probability matrix".into()));
    }
    if probs.len() != rows * num_classes {
        return Err(MetricError::InvalidArgument(format!(
            "expected {rows}x{num_classes} probabilities, got {} values",
            probs.len()
        )));
    }
    for (r, row) in probs.chunks(num_classes).enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetricError::InvalidArgument(format!(
                "row {r} contains a negative or non-finite probability"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(MetricError::InvalidArgument(format!(
                "row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<(), MetricError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(MetricError::InvalidArgument(format!(
            "label {bad} outside {num_classes} classes"
        )));
    }
    Ok(())
}

/// Average precision of one class: step-wise sum over distinct thresholds in
/// descending order. Returns `None` when the class has no positive or no
/// negative instance.
fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == n {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if positive[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

/// One-vs-rest AUC-ROC of one class via the rank statistic, ties averaged.
fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if positive[k] {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

fn macro_over_classes(
    probs: &[f64],
    num_classes: usize,
    labels: &[usize],
    per_class: fn(&[f64], &[bool]) -> Option<f64>,
) -> Result<f64, MetricError> {
    check_probs(probs, num_classes, labels.len())?;
    check_labels(labels, num_classes)?;
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for c in 0..num_classes {
        let scores: Vec<f64> = probs.chunks(num_classes).map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match per_class(&scores, &positive) {
            Some(v) => {
                total += v;
                evaluated += 1;
            }
            None => eprintln!("warning: class {c} has no positives or no negatives, skipped"),
        }
    }
    if evaluated == 0 {
        return Err(MetricError::NoEvaluableClass);
    }
    Ok(total / evaluated as f64)
}

/// Macro-averaged one-vs-rest average precision over row-stochastic scores.
pub fn auc_prc(probs: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64, MetricError> {
    macro_over_classes(probs, num_classes, labels, average_precision)
}

/// Macro-averaged one-vs-rest AUC-ROC over row-stochastic scores.
pub fn auc_roc(probs: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64, MetricError> {
    macro_over_classes(probs, num_classes, labels, roc_auc_binary)
}

/// Fraction of predictions matching the labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(MetricError::InvalidArgument(format!(
            "prediction/label lengths {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of instances where teacher and student predict the same class.
pub fn top1_agreement(teacher: &[usize], student: &[usize]) -> Result<f64, MetricError> {
    accuracy(teacher, student)
}

/// Mean KL from teacher rows to student rows; inputs are softened already.
pub fn predictive_kl(
    teacher_probs: &[f64],
    student_probs: &[f64],
    num_classes: usize,
) -> Result<f64, MetricError> {
    if teacher_probs.len() != student_probs.len() {
        return Err(MetricError::InvalidArgument(format!(
            "probability matrix lengths {} vs {}",
            teacher_probs.len(),
            student_probs.len()
        )));
    }
    if num_classes == 0 || teacher_probs.len() % num_classes != 0 || teacher_probs.is_empty() {
        return Err(MetricError::InvalidArgument("bad probability matrix shape".into()));
    }
    let rows = teacher_probs.len() / num_classes;
    check_probs(teacher_probs, num_classes.max(2), rows)?;
    check_probs(student_probs, num_classes.max(2), rows)?;
    let mut total = 0.0;
    for (t, s) in teacher_probs.chunks(num_classes).zip(student_probs.chunks(num_classes)) {
        total += kl_divergence(t, s)?;
    }
    Ok(total / rows as f64)
}

/// Mean squared difference between two equally long saliency maps.
pub fn saliency_mse(map_a: &[f64], map_b: &[f64]) -> Result<f64, MetricError> {
    if map_a.is_empty() || map_a.len() != map_b.len() {
        return Err(MetricError::InvalidArgument(format!(
            "map lengths {} vs {}",
            map_a.len(),
            map_b.len()
        )));
    }
    let sum: f64 = map_a.iter().zip(map_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / map_a.len() as f64)
}

/// Teacher-student fidelity on one evaluation set: top-1 agreement plus mean
/// predictive KL of distributions softened at `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub top1_agreement: f64,
    pub predictive_kl: f64,
    pub tau: f64,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Builds a [`FidelityReport`] from already-softened probability matrices.
pub fn fidelity_report(
    teacher_probs: &[f64],
    student_probs: &[f64],
    num_classes: usize,
    tau: f64,
) -> Result<FidelityReport, MetricError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(MetricError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let kl = predictive_kl(teacher_probs, student_probs, num_classes)?;
    let t_pred: Vec<usize> = teacher_probs.chunks(num_classes).map(argmax).collect();
    let s_pred: Vec<usize> = student_probs.chunks(num_classes).map(argmax).collect();
    Ok(FidelityReport { top1_agreement: top1_agreement(&t_pred, &s_pred)?, predictive_kl: kl, tau })
}

/// Metric values keyed by `(method, dataset, seed)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    entries: BTreeMap<(String, String, u64), BTreeMap<String, f64>>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records one metric value, rejecting values outside the metric's range.
    pub fn insert(
        &mut self,
        method: &str,
        dataset: &str,
        seed: u64,
        metric: &str,
        value: f64,
    ) -> Result<(), MetricError> {
        if !value.is_finite() {
            return Err(MetricError::InvalidArgument(format!(
                "non-finite value for {metric}"
            )));
        }
        let unit_range = metric.starts_with("auc")
            || metric == "accuracy"
            || metric == "top1_agreement";
        if unit_range && !(0.0..=1.0).contains(&value) {
            return Err(MetricError::InvalidArgument(format!(
                "{metric} value {value} outside [0, 1]"
            )));
        }
        if (metric == "predictive_kl" || metric.ends_with("mse")) && value < 0.0 {
            return Err(MetricError::InvalidArgument(format!(
                "{metric} value {value} is negative"
            )));
        }
        self.entries
            .entry((method.to_string(), dataset.to_string(), seed))
            .or_default()
            .insert(metric.to_string(), value);
        Ok(())
    }

    pub fn get(&self, method: &str, dataset: &str, seed: u64, metric: &str) -> Option<f64> {
        self.entries
            .get(&(method.to_string(), dataset.to_string(), seed))
            .and_then(|m| m.get(metric).copied())
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| k.0.clone()).collect();
        out.dedup();
        out
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| k.1.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.entries.values().flat_map(|m| m.keys().cloned()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Mean of `metric` over seeds for every `(method, dataset)` holding it.
    pub fn seed_averaged(&self, metric: &str) -> BTreeMap<(String, String), f64> {
        let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for ((method, dataset, _), metrics) in &self.entries {
            if let Some(&v) = metrics.get(metric) {
                let cell = sums.entry((method.clone(), dataset.clone())).or_insert((0.0, 0));
                cell.0 += v;
                cell.1 += 1;
            }
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Long-form delimited text: method, dataset, seed, metric, value.
    pub fn to_delimited(&self) -> String {
        let mut text = String::from("method\tdataset\tseed\tmetric\tvalue\n");
        for ((method, dataset, seed), metrics) in &self.entries {
            for (metric, value) in metrics {
                writeln!(text, "{method}\t{dataset}\t{seed}\t{metric}\t{value:?}")
                    .expect("string write");
            }
        }
        text
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricError> {
        write_atomic(path, self.to_delimited().as_bytes())?;
        Ok(())
    }

    /// Parses the long-form text emitted by [`ScoreTable::to_delimited`].
    pub fn from_delimited(text: &str) -> Result<Self, MetricError> {
        let mut lines = text.lines();
        match lines.next() {
            Some("method\tdataset\tseed\tmetric\tvalue") => {}
            _ => {
                return Err(MetricError::InvalidArgument(
                    "missing score table header".into(),
                ))
            }
        }
        let mut table = ScoreTable::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [method, dataset, seed, metric, value] = fields[..] else {
                return Err(MetricError::InvalidArgument(format!(
                    "row {} has {} fields, expected 5",
                    i + 2,
                    fields.len()
                )));
            };
            let seed: u64 = seed.parse().map_err(|_| {
                MetricError::InvalidArgument(format!("bad seed {seed:?} in row {}", i + 2))
            })?;
            let value: f64 = value.parse().map_err(|_| {
                MetricError::InvalidArgument(format!("bad value {value:?} in row {}", i + 2))
            })?;
            table.insert(method, dataset, seed, metric, value)?;
        }
        Ok(table)
    }

    /// Seed-averaged method-by-dataset summary of one metric, with a trailing
    /// cross-dataset mean column.
    pub fn pivot(&self, metric: &str) -> Result<String, MetricError> {
        let averaged = self.seed_averaged(metric);
        let methods = self.methods();
        let datasets = self.datasets();
        if methods.is_empty() {
            return Err(MetricError::InvalidArgument("empty score table".into()));
        }
        let mut text = String::from("method");
        for d in &datasets {
            write!(text, "\t{d}").expect("string write");
        }
        text.push_str("\tmean\n");
        for m in &methods {
            write!(text, "{m}").expect("string write");
            let mut total = 0.0;
            for d in &datasets {
                let v = averaged.get(&(m.clone(), d.clone())).copied().ok_or_else(|| {
                    MetricError::MissingCell {
                        method: m.clone(),
                        dataset: d.clone(),
                        metric: metric.to_string(),
                    }
                })?;
                total += v;
                write!(text, "\t{v:?}").expect("string write");
            }
            writeln!(text, "\t{:?}", total / datasets.len() as f64).expect("string write");
        }
        Ok(text)
    }
}

/// Per-method standing after ranking seed-averaged scores dataset by dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStanding {
    pub avg_rank: f64,
    pub wins: usize,
    pub losses: usize,
}

/// Ranks methods per dataset (descending metric, ties get the average rank,
/// every tied leader wins) and averages ranks across datasets.
pub fn rank_and_wins(
    table: &ScoreTable,
    metric: &str,
) -> Result<BTreeMap<String, MethodStanding>, MetricError> {
    let averaged = table.seed_averaged(metric);
    let methods = table.methods();
    let datasets = table.datasets();
    if methods.is_empty() || datasets.is_empty() {
        return Err(MetricError::InvalidArgument("empty score table".into()));
    }
    let mut rank_sums: BTreeMap<&str, f64> = BTreeMap::new();
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    let mut losses: BTreeMap<&str, usize> = BTreeMap::new();
    for dataset in &datasets {
        let mut scored: Vec<(&str, f64)> = Vec::with_capacity(methods.len());
        for method in &methods {
            let v = averaged.get(&(method.clone(), dataset.clone())).copied().ok_or_else(
                || MetricError::MissingCell {
                    method: method.clone(),
                    dataset: dataset.clone(),
                    metric: metric.to_string(),
                },
            )?;
            scored.push((method, v));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(b.0)));
        let best = scored[0].1;
        let mut i = 0;
        while i < scored.len() {
            let mut j = i;
            while j < scored.len() && scored[j].1 == scored[i].1 {
                j += 1;
            }
            let avg_rank = (i + 1 + j) as f64 / 2.0;
            for &(method, value) in &scored[i..j] {
                *rank_sums.entry(method).or_default() += avg_rank;
                if value == best {
                    *wins.entry(method).or_default() += 1;
                } else {
                    *losses.entry(method).or_default() += 1;
                }
            }
            i = j;
        }
    }
    Ok(methods
        .iter()
        .map(|m| {
            (
                m.clone(),
                MethodStanding {
                    avg_rank: rank_sums[m.as_str()] / datasets.len() as f64,
                    wins: wins.get(m.as_str()).copied().unwrap_or(0),
                    losses: losses.get(m.as_str()).copied().unwrap_or(0),
                },
            )
        })
        .collect())
}
