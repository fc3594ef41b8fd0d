//! Confusion matrices and precision / recall / F1 / accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{EflError, Result};

/// `counts[t][p]` = samples with true label `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    positive_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One-vs-rest scores of the positive label.
    PositiveClass,
    /// Per-label scores averaged with true-label support as weights.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub averaging: Averaging,
    /// Some ratio had a zero denominator and was scored 0.
    pub zero_division: bool,
}

impl ConfusionMatrix {
    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn positive_label(&self) -> usize {
        self.positive_label
    }

    pub fn n_labels(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_labels()).map(|i| self.counts[i][i]).sum()
    }

    /// `(tp, fp, fn, tn)` for `label` against the rest.
    pub fn one_vs_rest(&self, label: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[label][label];
        let fp: u64 = (0..self.n_labels()).filter(|&t| t != label).map(|t| self.counts[t][label]).sum();
        let fn_: u64 = (0..self.n_labels()).filter(|&p| p != label).map(|p| self.counts[label][p]).sum();
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

/// Tallies predictions against truths.
pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    n_labels: usize,
    positive_label: usize,
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(EflError::contract(format!("{} predictions for {} truths", predictions.len(), truths.len())));
    }
    if predictions.is_empty() {
        return Err(EflError::contract("confusion matrix over zero samples"));
    }
    if positive_label >= n_labels {
        return Err(EflError::contract(format!("positive label {positive_label} >= {n_labels}")));
    }
    let mut counts = vec![vec![0u64; n_labels]; n_labels];
    for (i, (&p, &t)) in predictions.iter().zip(truths).enumerate() {
        if p >= n_labels || t >= n_labels {
            return Err(EflError::contract(format!("sample {i}: label out of range for {n_labels} labels")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, positive_label })
}

fn ratio(num: u64, den: u64, zero: &mut bool) -> f64 {
    if den == 0 {
        *zero = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64, zero: &mut bool) -> f64 {
    if p + r == 0.0 {
        *zero = true;
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn scores(cm: &ConfusionMatrix, averaging: Averaging) -> ScoreSet {
    let mut zero = false;
    let accuracy = cm.accuracy();
    let (precision, recall, f1) = match averaging {
        Averaging::PositiveClass => {
            let (tp, fp, fn_, _) = cm.one_vs_rest(cm.positive_label);
            let p = ratio(tp, tp + fp, &mut zero);
            let r = ratio(tp, tp + fn_, &mut zero);
            (p, r, harmonic(p, r, &mut zero))
        }
        Averaging::Weighted => {
            let n = cm.total() as f64;
            let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
            for l in 0..cm.n_labels() {
                let (tp, fp, fn_, _) = cm.one_vs_rest(l);
                let support = tp + fn_;
                if support == 0 {
                    continue;
                }
                let mut z = false;
                let p = ratio(tp, tp + fp, &mut z);
                let r = ratio(tp, tp + fn_, &mut z);
                let f = harmonic(p, r, &mut z);
                zero |= z;
                let w = support as f64 / n;
                p_sum += w * p;
                r_sum += w * r;
                f_sum += w * f;
            }
            (p_sum, r_sum, f_sum)
        }
    };
    ScoreSet { precision, recall, f1, accuracy, averaging, zero_division: zero }
}

/// Both averaging modes at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub positive_class: ScoreSet,
    pub weighted: ScoreSet,
}

impl ScoreReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self { positive_class: scores(cm, Averaging::PositiveClass), weighted: scores(cm, Averaging::Weighted) }
    }

    pub fn accuracy(&self) -> f64 {
        self.positive_class.accuracy
    }
}
