//! Confusion-matrix metrics with macro averaging over the two classes,
//! rank AUC, ROC curves and percentile bootstrap intervals.

use indexmap::IndexMap;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const THRESHOLD: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP: usize = 500;

/// Metric keys in report order.
pub const METRIC_NAMES: [&str; 7] = ["accuracy", "auc", "f1", "precision", "recall", "sensitivity", "specificity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(labels: &[u8], predictions: &[u8]) -> Self {
        let mut cm = Self::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (0, 0) => cm.tn += 1,
                (0, _) => cm.fp += 1,
                (_, 0) => cm.fn_ += 1,
                _ => cm.tp += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "auc" => self.auc,
            "f1" => Some(self.f1),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "sensitivity" => Some(self.sensitivity),
            "specificity" => Some(self.specificity),
            _ => None,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Threshold-dependent metrics; per-class precision, recall and F1 are
/// averaged with equal class weight.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricSet> {
    if cm.total() == 0 {
        return Err(Error::Contract("confusion matrix is empty".into()));
    }
    let ConfusionMatrix { tn, fp, fn_, tp } = *cm;
    let (prec_pos, prec_neg) = (ratio(tp, tp + fp), ratio(tn, tn + fn_));
    let (rec_pos, rec_neg) = (ratio(tp, tp + fn_), ratio(tn, tn + fp));
    Ok(MetricSet {
        accuracy: ratio(tp + tn, cm.total()),
        auc: None,
        f1: (f1(prec_pos, rec_pos) + f1(prec_neg, rec_neg)) / 2.0,
        precision: (prec_pos + prec_neg) / 2.0,
        recall: (rec_pos + rec_neg) / 2.0,
        sensitivity: rec_pos,
        specificity: rec_neg,
    })
}

fn check_lengths(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::Contract(format!(
            "need equal nonzero lengths, got {} labels and {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {l} outside {{0, 1}}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("scores must be finite".into()));
    }
    Ok(())
}

pub fn predict(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= THRESHOLD)).collect()
}

pub fn compute_metrics(labels: &[u8], scores: &[f64]) -> Result<MetricSet> {
    compute_metrics_with_predictions(labels, &predict(scores), scores)
}

pub fn compute_metrics_with_predictions(labels: &[u8], predictions: &[u8], scores: &[f64]) -> Result<MetricSet> {
    check_lengths(labels, scores)?;
    if predictions.len() != labels.len() {
        return Err(Error::Contract("predictions and labels differ in length".into()));
    }
    let mut m = metrics_from_confusion(&ConfusionMatrix::from_predictions(labels, predictions))?;
    m.auc = rank_auc(labels, scores);
    Ok(m)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half; computed from mid-ranks.
pub fn rank_auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` count as positive; `+∞` for the origin.
    pub threshold: f64,
}

/// One point per distinct score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(labels: &[u8], scores: &[f64]) -> Result<Vec<RocPoint>> {
    check_lengths(labels, scores)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Contract("ROC curve needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push(RocPoint {
            fpr: fp / neg,
            tpr: tp / pos,
            threshold: t,
        });
    }
    Ok(pts)
}

pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: MetricSet,
    pub n_boot: usize,
    pub seed: u64,
    /// Keyed by [`METRIC_NAMES`]; `auc` is missing when it is undefined on
    /// the full sample or on every resample.
    pub intervals: IndexMap<String, Interval>,
}

/// Linear interpolation between closest ranks on sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile bootstrap over `(label, score)` pairs. Resample `i` draws from
/// its own stream of `seed`, and results are gathered in index order.
pub fn bootstrap_ci(labels: &[u8], scores: &[f64], n_boot: usize, seed: u64) -> Result<BootstrapResult> {
    check_lengths(labels, scores)?;
    if labels.len() < 10 {
        return Err(Error::Contract(format!("bootstrap needs at least 10 samples, got {}", labels.len())));
    }
    if n_boot == 0 {
        return Err(Error::Contract("bootstrap needs at least one resample".into()));
    }
    let point = compute_metrics(labels, scores)?;
    let n = labels.len();
    let base = rng::derive_seed(seed, "bootstrap");
    let resampled: Vec<MetricSet> = (0..n_boot as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(base, i);
            let (mut l, mut s) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let j = r.random_range(0..n);
                l.push(labels[j]);
                s.push(scores[j]);
            }
            compute_metrics(&l, &s)
        })
        .collect::<Result<_>>()?;
    let mut intervals = IndexMap::new();
    for name in METRIC_NAMES {
        let Some(p) = point.get(name) else { continue };
        let samples: Vec<f64> = resampled.iter().filter_map(|m| m.get(name)).collect();
        if samples.is_empty() {
            continue;
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        intervals.insert(
            name.to_owned(),
            Interval {
                point: p,
                lower: percentile(&sorted, 2.5),
                upper: percentile(&sorted, 97.5),
                samples,
            },
        );
    }
    Ok(BootstrapResult {
        point,
        n_boot,
        seed,
        intervals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: usize,
    pub count: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: Vec<DomainRow>,
    /// Population variance of the per-domain accuracies.
    pub accuracy_variance: f64,
}

pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Metrics per domain group `(domain, labels, scores)`; empty groups are
/// skipped with a warning.
pub fn per_domain_report(groups: &[(usize, Vec<u8>, Vec<f64>)]) -> Result<DomainReport> {
    let mut rows = Vec::new();
    for (domain, labels, scores) in groups {
        if labels.is_empty() {
            log::warn!("domain {domain} has no samples, omitted from the report");
            continue;
        }
        rows.push(DomainRow {
            domain: *domain,
            count: labels.len(),
            metrics: compute_metrics(labels, scores)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Contract("no nonempty domain group".into()));
    }
    let acc: Vec<f64> = rows.iter().map(|r| r.metrics.accuracy).collect();
    Ok(DomainReport {
        accuracy_variance: population_variance(&acc),
        rows,
    })
}
