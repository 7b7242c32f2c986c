//! Accuracy and group-disparity metrics.
//!
//! Every disparity is signed as group `s = 1` (majority) minus group `s = 0`
//! (minority). Absolute values are reported alongside.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{classify_batch, MlpModel, ModelError, Prediction};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions, {1} labels, {2} groups")]
    LengthMismatch(usize, usize, usize),
    #[error("group {0} has no samples")]
    EmptyGroup(usize),
    #[error("value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("points {0} and {1} coincide but are classified differently")]
    CoincidentCrossing(usize, usize),
    #[error("need at least two points")]
    TooFewPoints,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: u8, label: u8) {
        match (predicted, label) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn positive_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Indexed by group `s`.
    pub accuracy_by_group: [f64; 2],
    pub disparate_impact: f64,
    /// `None` when a group has no negatives.
    pub disparate_fpr: Option<f64>,
    /// `None` when a group has no positives.
    pub disparate_fnr: Option<f64>,
    pub abs_disparate_impact: f64,
    pub abs_disparate_fpr: Option<f64>,
    pub abs_disparate_fnr: Option<f64>,
    pub counts: [ConfusionCounts; 2],
}

impl EvalReport {
    pub fn from_counts(counts: [ConfusionCounts; 2]) -> Result<Self> {
        for (s, c) in counts.iter().enumerate() {
            if c.total() == 0 {
                return Err(MetricsError::EmptyGroup(s));
            }
        }
        let [c0, c1] = counts;
        let correct = c0.tp + c0.tn + c1.tp + c1.tn;
        let diff = |f: fn(&ConfusionCounts) -> Option<f64>| Some(f(&c1)? - f(&c0)?);
        let di = diff(ConfusionCounts::positive_rate).expect("groups nonempty");
        let fpr = diff(ConfusionCounts::fpr);
        let fnr = diff(ConfusionCounts::fnr);
        Ok(Self {
            accuracy: correct as f64 / (c0.total() + c1.total()) as f64,
            accuracy_by_group: [c0.accuracy().unwrap(), c1.accuracy().unwrap()],
            disparate_impact: di,
            disparate_fpr: fpr,
            disparate_fnr: fnr,
            abs_disparate_impact: di.abs(),
            abs_disparate_fpr: fpr.map(f64::abs),
            abs_disparate_fnr: fnr.map(f64::abs),
            counts,
        })
    }

    pub const CSV_HEADER: [&'static str; 4] =
        ["Accuracy", "Disparate Impact", "Disparate FPR", "Disparate FNR"];

    /// Table columns in percent; unavailable rates are written as `NA`.
    pub fn csv_row(&self) -> [String; 4] {
        let pct = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.4}", 100.0 * x));
        [
            pct(Some(self.accuracy)),
            pct(Some(self.disparate_impact)),
            pct(self.disparate_fpr),
            pct(self.disparate_fnr),
        ]
    }
}

fn check_binary(values: &[u8]) -> Result<()> {
    match values.iter().position(|&v| v > 1) {
        Some(index) => Err(MetricsError::NotBinary {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Tallies predictions against labels per sensitive group.
pub fn evaluate(predictions: &[Prediction], labels: &[u8], sensitive: &[u8]) -> Result<EvalReport> {
    let predicted: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    evaluate_labels(&predicted, labels, sensitive)
}

pub fn evaluate_labels(predicted: &[u8], labels: &[u8], sensitive: &[u8]) -> Result<EvalReport> {
    if predicted.len() != labels.len() || labels.len() != sensitive.len() {
        return Err(MetricsError::LengthMismatch(
            predicted.len(),
            labels.len(),
            sensitive.len(),
        ));
    }
    check_binary(labels)?;
    check_binary(sensitive)?;
    let mut counts = [ConfusionCounts::default(); 2];
    for ((&p, &y), &s) in predicted.iter().zip(labels).zip(sensitive) {
        counts[s as usize].add(p, y);
    }
    EvalReport::from_counts(counts)
}

/// Disparities between two levels of a multi-valued group attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDisparity {
    pub group_a: usize,
    pub group_b: usize,
    /// Signed `a − b`.
    pub disparate_impact: f64,
    pub disparate_fpr: Option<f64>,
    pub disparate_fnr: Option<f64>,
}

/// Per-level confusion counts for a multi-valued group attribute.
pub fn group_counts(predicted: &[u8], labels: &[u8], groups: &[usize]) -> Result<BTreeMap<usize, ConfusionCounts>> {
    if predicted.len() != labels.len() || labels.len() != groups.len() {
        return Err(MetricsError::LengthMismatch(
            predicted.len(),
            labels.len(),
            groups.len(),
        ));
    }
    let mut out: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
    for ((&p, &y), &g) in predicted.iter().zip(labels).zip(groups) {
        out.entry(g).or_default().add(p, y);
    }
    Ok(out)
}

pub fn pairwise_disparity(
    predicted: &[u8],
    labels: &[u8],
    groups: &[usize],
    a: usize,
    b: usize,
) -> Result<PairwiseDisparity> {
    let counts = group_counts(predicted, labels, groups)?;
    let ca = counts.get(&a).ok_or(MetricsError::EmptyGroup(a))?;
    let cb = counts.get(&b).ok_or(MetricsError::EmptyGroup(b))?;
    let diff = |f: fn(&ConfusionCounts) -> Option<f64>| Some(f(ca)? - f(cb)?);
    Ok(PairwiseDisparity {
        group_a: a,
        group_b: b,
        disparate_impact: diff(ConfusionCounts::positive_rate).expect("groups nonempty"),
        disparate_fpr: diff(ConfusionCounts::fpr),
        disparate_fnr: diff(ConfusionCounts::fnr),
    })
}

/// `1 / min ‖z − z'‖` over pairs the classifier labels differently; 0 when
/// every point gets the same label.
pub fn empirical_lipschitz(classifier: &MlpModel, latents: ArrayView2<f64>) -> Result<f64> {
    if latents.nrows() < 2 {
        return Err(MetricsError::TooFewPoints);
    }
    let labels: Vec<u8> = classify_batch(classifier, latents)?
        .iter()
        .map(|p| p.label)
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..latents.nrows() {
        for j in (i + 1)..latents.nrows() {
            if labels[i] == labels[j] {
                continue;
            }
            let d = (&latents.row(i) - &latents.row(j)).mapv(|x| x * x).sum().sqrt();
            if d == 0.0 {
                return Err(MetricsError::CoincidentCrossing(i, j));
            }
            best = best.min(d);
        }
    }
    Ok(if best.is_finite() { 1.0 / best } else { 0.0 })
}
