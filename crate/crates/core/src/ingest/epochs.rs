//! Segmentation of a recording into labeled 30-second epochs.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::edf::SignalRecord;
use super::hypnogram::{map_stage, HypnogramEntry, SleepStage};
use super::IngestError;

pub const EPOCH_SECONDS: f64 = 30.0;

/// One 30-second labeled window. `subject_id` doubles as the record of origin
/// used to audit that held-out subjects never reach training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub subject_id: String,
    pub recording_id: String,
    pub start_s: f64,
    pub samples: Vec<f32>,
    pub stage: SleepStage,
}

impl Epoch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Epochs plus the labels that were skipped, keyed by raw label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub epochs: Vec<Epoch>,
    pub excluded: BTreeMap<String, usize>,
}

/// Number of samples in one epoch, if the sampling rate yields a whole number.
pub fn epoch_length(sample_rate_hz: f64) -> Option<usize> {
    let l = sample_rate_hz * EPOCH_SECONDS;
    (l > 0.0 && l.fract() == 0.0 && l.is_finite()).then_some(l as usize)
}

/// Cut `signal` into 30-s windows following the hypnogram.
///
/// Each entry contributes `floor(duration / 30)` windows starting at its
/// onset. Windows whose label does not map to a stage are counted in
/// `excluded` and never materialized, so an unscored tail running past the end
/// of the signal is harmless; a scored window past the end is a `CoverageGap`.
pub fn segment_epochs(
    signal: &SignalRecord,
    hypnogram: &[HypnogramEntry],
) -> Result<Segmentation, IngestError> {
    let len = epoch_length(signal.sample_rate_hz)
        .ok_or(IngestError::NonIntegralEpoch(signal.sample_rate_hz))?;
    let mut out = Segmentation::default();
    for entry in hypnogram {
        let windows = (entry.duration_s / EPOCH_SECONDS + 1e-9).floor() as usize;
        let stage = map_stage(&entry.raw_label);
        for w in 0..windows {
            let start_s = entry.onset_s + w as f64 * EPOCH_SECONDS;
            let Some(stage) = stage else {
                *out.excluded.entry(entry.raw_label.clone()).or_default() += 1;
                continue;
            };
            let start = (start_s * signal.sample_rate_hz).round() as usize;
            let end = start + len;
            if end > signal.samples.len() {
                return Err(IngestError::CoverageGap {
                    recording: signal.recording_id.clone(),
                    needed_s: end as f64 / signal.sample_rate_hz,
                    available_s: signal.samples.len() as f64 / signal.sample_rate_hz,
                });
            }
            out.epochs.push(Epoch {
                subject_id: signal.subject_id.clone(),
                recording_id: signal.recording_id.clone(),
                start_s,
                samples: signal.samples[start..end].iter().map(|&v| v as f32).collect(),
                stage,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimmed {
    pub epochs: Vec<Epoch>,
    /// Set when the input held no sleep epoch and was returned unchanged.
    pub all_wake: bool,
}

/// Keep the sleep period plus `margin_min` minutes of Wake on either side.
/// Epochs must be in temporal order for one recording.
pub fn trim_wake(epochs: Vec<Epoch>, margin_min: usize) -> Trimmed {
    let margin = (margin_min as f64 * 60.0 / EPOCH_SECONDS) as usize;
    let first = epochs.iter().position(|e| e.stage != SleepStage::Wake);
    let last = epochs.iter().rposition(|e| e.stage != SleepStage::Wake);
    match (first, last) {
        (Some(first), Some(last)) => {
            let lo = first.saturating_sub(margin);
            let hi = (last + margin + 1).min(epochs.len());
            Trimmed {
                epochs: epochs.into_iter().skip(lo).take(hi - lo).collect(),
                all_wake: false,
            }
        }
        _ => Trimmed {
            all_wake: !epochs.is_empty(),
            epochs,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub count: usize,
    pub fraction: f64,
}

/// Per-stage epoch counts and fractions. All five stages are always present.
pub fn dataset_summary(epochs: &[Epoch]) -> BTreeMap<SleepStage, StageShare> {
    let mut counts = [0usize; 5];
    for e in epochs {
        counts[e.stage.index()] += 1;
    }
    let total = epochs.len();
    SleepStage::ALL
        .iter()
        .map(|&s| {
            let count = counts[s.index()];
            let fraction = if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            };
            (s, StageShare { count, fraction })
        })
        .collect()
}
