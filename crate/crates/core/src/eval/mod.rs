//! Confusion matrices, per-class and macro F1, and subject-wise splits.
//!
//! Rows of a [`ConfusionMatrix`] are the reference (scored) stages, columns
//! the predicted ones, both in W, S1, S2, S3, REM order.

mod report;

pub use report::{heatmap_png, render_metrics, render_table, ResultRow};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::ingest::{Dataset, SleepStage};
use crate::model::ModelError;
use crate::nn::Graph;
use crate::train::Network;

pub const N_STAGES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {references} references")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("label {0} is not a stage index")]
    InvalidLabel(usize),
    #[error("subject {0} is not in the dataset")]
    UnknownSubject(String),
    #[error("model expects epochs of length {expected}, data has {found}")]
    ConfigMismatch { expected: usize, found: usize },
    #[error("cannot make {folds} folds from {subjects} subjects")]
    InvalidFolds { folds: usize, subjects: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_STAGES]; N_STAGES],
}

impl ConfusionMatrix {
    pub fn from_labels(predictions: &[usize], references: &[usize]) -> Result<Self, EvalError> {
        if predictions.len() != references.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                references: references.len(),
            });
        }
        let mut cm = Self::default();
        for (&p, &r) in predictions.iter().zip(references) {
            if p >= N_STAGES || r >= N_STAGES {
                return Err(EvalError::InvalidLabel(p.max(r)));
            }
            cm.counts[r][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_STAGES).map(|i| self.counts[i][i]).sum()
    }

    /// Reference count (support) of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Predicted count of class `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: [f64; N_STAGES],
    pub recall: [f64; N_STAGES],
    pub f1: [f64; N_STAGES],
    pub support: [u64; N_STAGES],
    /// Classes with no reference epochs: their F1 is reported as 0 and left
    /// out of `macro_f1`.
    pub zero_support: Vec<SleepStage>,
    pub macro_f1: f64,
}

/// Accuracy, per-class precision/recall/F1 and macro F1 over classes with support.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut r = MetricsReport {
        accuracy: ratio(cm.trace(), total),
        precision: [0.0; N_STAGES],
        recall: [0.0; N_STAGES],
        f1: [0.0; N_STAGES],
        support: [0; N_STAGES],
        zero_support: vec![],
        macro_f1: 0.0,
    };
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..N_STAGES {
        let tp = cm.counts[c][c];
        let (row, col) = (cm.row_sum(c), cm.col_sum(c));
        r.support[c] = row;
        r.precision[c] = ratio(tp, col);
        r.recall[c] = ratio(tp, row);
        // 2PR/(P+R) written on counts
        r.f1[c] = ratio(2 * tp, row + col);
        if row == 0 {
            r.zero_support.push(SleepStage::from_index(c).expect("stage index"));
        } else {
            sum += r.f1[c];
            counted += 1;
        }
    }
    r.macro_f1 = sum / counted as f64;
    Ok(r)
}

/// Index of the largest entry in each row of width `width`; ties go to the
/// lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(data: &[T], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Training set (every other subject) and test set (`held_out` only).
pub fn loso_split(data: &Dataset, held_out: &str) -> Result<(Dataset, Dataset), EvalError> {
    if !data.epochs.iter().any(|e| e.subject_id == held_out) {
        return Err(EvalError::UnknownSubject(held_out.to_string()));
    }
    let set = BTreeSet::from([held_out.to_string()]);
    Ok((data.select(&set, false), data.select(&set, true)))
}

/// Subject-wise folds: sorted subjects dealt round-robin into `k` groups.
pub fn subject_folds(subjects: &[String], k: usize) -> Result<Vec<BTreeSet<String>>, EvalError> {
    if k < 2 || k > subjects.len() {
        return Err(EvalError::InvalidFolds {
            folds: k,
            subjects: subjects.len(),
        });
    }
    let mut sorted = subjects.to_vec();
    sorted.sort();
    let mut folds = vec![BTreeSet::new(); k];
    for (i, s) in sorted.into_iter().enumerate() {
        folds[i % k].insert(s);
    }
    Ok(folds)
}

/// Predicted stage index of every epoch, evaluated in chunks.
pub fn predict<N: Network + ?Sized>(net: &N, data: &Dataset, chunk: usize) -> Result<Vec<usize>, EvalError> {
    if net.input_length() != data.epoch_len && !data.is_empty() {
        return Err(EvalError::ConfigMismatch {
            expected: net.input_length(),
            found: data.epoch_len,
        });
    }
    let mut out = Vec::with_capacity(data.len());
    for block in data.epochs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let rows: Vec<&[f32]> = block.iter().map(|e| e.samples.as_slice()).collect();
        let logits = net.logits(&mut g, &vars, &rows)?;
        out.extend(argmax_rows(g.value(logits).data(), N_STAGES));
    }
    Ok(out)
}

pub fn evaluate<N: Network + ?Sized>(net: &N, data: &Dataset) -> Result<(ConfusionMatrix, MetricsReport), EvalError> {
    let predicted = predict(net, data, 256)?;
    let reference: Vec<usize> = data.epochs.iter().map(|e| e.stage.index()).collect();
    let cm = ConfusionMatrix::from_labels(&predicted, &reference)?;
    let m = metrics(&cm)?;
    Ok((cm, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_and_all_wake() {
        let refs = [0, 1, 2, 3, 4, 2, 2];
        let cm = ConfusionMatrix::from_labels(&refs, &refs).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let want = if r == c { refs.iter().filter(|&&x| x == r).count() as u64 } else { 0 };
                assert_eq!(cm.counts[r][c], want);
            }
        }
        let cm = ConfusionMatrix::from_labels(&[0; 7], &refs).unwrap();
        assert!((0..5).all(|r| (1..5).all(|c| cm.counts[r][c] == 0)));
        assert_eq!(cm.col_sum(0), 7);
        assert!(ConfusionMatrix::from_labels(&[0], &[0, 1]).is_err());
        assert!(ConfusionMatrix::from_labels(&[5], &[0]).is_err());
    }

    #[test]
    fn counting_oracle() {
        let mut rng = crate::rng::seeded(13);
        let p: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let r: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let cm = ConfusionMatrix::from_labels(&p, &r).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let n = p.iter().zip(&r).filter(|(x, y)| **y == a && **x == b).count() as u64;
                assert_eq!(cm.counts[a][b], n);
            }
        }
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn diagonal_metrics() {
        let mut cm = ConfusionMatrix::default();
        (0..5).for_each(|i| cm.counts[i][i] = 2);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, [1.0; 5]);
        assert_eq!(m.macro_f1, 1.0);
        assert!(metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn binary_collapse() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0] = [2, 1, 0, 0, 0];
        cm.counts[1] = [1, 2, 0, 0, 0];
        let m = metrics(&cm).unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.zero_support, vec![SleepStage::S2, SleepStage::S3, SleepStage::Rem]);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }

    #[test]
    fn folds_partition_subjects() {
        let s: Vec<String> = (0..7).map(|i| format!("S{i}")).collect();
        let f = subject_folds(&s, 3).unwrap();
        assert_eq!(f.iter().map(BTreeSet::len).sum::<usize>(), 7);
        assert!(subject_folds(&s, 8).is_err());
    }
}
