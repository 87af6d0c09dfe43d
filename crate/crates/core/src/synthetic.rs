//! Synthetic sleep recordings for tests, examples and smoke runs.
//!
//! Each stage has its own dominant rhythm; every epoch gets a random
//! amplitude, offset and phase on top, plus white noise.

use rand::Rng;
use std::f64::consts::TAU;
use std::path::Path;

use crate::ingest::{
    write_edf, write_hypnogram, Dataset, EdfHeader, Epoch, HypnogramEntry, IngestError, SignalMeta,
    SignalRecord, SleepStage, EPOCH_SECONDS,
};
use crate::rng::stream;

/// Dominant frequency of each stage in cycles per sample.
const FREQ: [f64; 5] = [0.2, 0.12, 0.07, 0.02, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub epoch_len: usize,
    pub noise: f64,
    /// Range of the per-epoch rhythm amplitude.
    pub amplitude: (f64, f64),
    /// Half-width of the uniform per-epoch DC offset.
    pub offset_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects: 3,
            epochs_per_subject: 20,
            epoch_len: 64,
            noise: 0.1,
            amplitude: (0.5, 2.0),
            offset_spread: 1.0,
            seed: 0,
        }
    }
}

/// One epoch of `stage` drawn with the amplitude, offset and noise of `spec`.
pub fn synthetic_epoch<R: Rng + ?Sized>(stage: SleepStage, spec: &SyntheticSpec, rng: &mut R) -> Vec<f32> {
    let (lo, hi) = spec.amplitude;
    let amp = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let spread = spec.offset_spread;
    let offset = if spread > 0.0 {
        rng.random_range(-spread..spread)
    } else {
        0.0
    };
    let noise = spec.noise;
    let len = spec.epoch_len;
    let phase = rng.random_range(0.0..TAU);
    let f = FREQ[stage.index()];
    (0..len)
        .map(|i| {
            let v = offset + amp * (TAU * f * i as f64 + phase).sin();
            (v + noise * rng.random_range(-1.0..1.0)) as f32
        })
        .collect()
}

/// Subjects `SC4{00+i}` with stages cycling W, S1, S2, S3, REM so every
/// subject has every stage when `epochs_per_subject >= 5`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut epochs = Vec::with_capacity(spec.subjects * spec.epochs_per_subject);
    for s in 0..spec.subjects {
        let subject = format!("SC4{s:02}");
        let mut rng = stream(spec.seed, "synthetic", s as u64);
        for k in 0..spec.epochs_per_subject {
            let stage = SleepStage::ALL[k % 5];
            epochs.push(Epoch {
                subject_id: subject.clone(),
                recording_id: format!("{subject}1"),
                start_s: 30.0 * k as f64,
                samples: synthetic_epoch(stage, spec, &mut rng),
                stage,
            });
        }
    }
    Dataset::new(spec.epoch_len as f64 / 30.0, spec.epoch_len, epochs)
}

const LABELS: [&str; 5] = ["Sleep stage W", "Sleep stage 1", "Sleep stage 2", "Sleep stage 3", "Sleep stage R"];

/// Write [`synthetic_dataset`] as Sleep-EDF style files: one
/// `SC4ss1E0-PSG.edf` with a single `channel` and one matching
/// `SC4ss1EC-Hypnogram.edf` per subject.
///
/// `epoch_len` must be a multiple of 30 so the sampling rate is a whole
/// number of Hz. Samples are quantized to 16 bits, so ingesting the files
/// gives back the dataset up to one digital step.
pub fn write_edf_dir(dir: &Path, spec: &SyntheticSpec, channel: &str) -> Result<(), IngestError> {
    if spec.epoch_len == 0 || !spec.epoch_len.is_multiple_of(EPOCH_SECONDS as usize) {
        return Err(IngestError::NonIntegralEpoch(spec.epoch_len as f64 / EPOCH_SECONDS));
    }
    let rate = spec.epoch_len / EPOCH_SECONDS as usize;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| IngestError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let data = synthetic_dataset(spec);
    for (subject, epochs) in data.by_subject() {
        let samples: Vec<f64> = epochs
            .iter()
            .flat_map(|e| e.samples.iter().map(|&v| f64::from(v)))
            .collect();
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let header = EdfHeader {
            version: "0".into(),
            patient: subject.clone(),
            recording: format!("{subject}1"),
            start_date: "01.01.89".into(),
            start_time: "22.00.00".into(),
            reserved: String::new(),
            n_data_records: samples.len() / rate,
            record_duration_s: 1.0,
            signals: vec![SignalMeta {
                label: channel.into(),
                transducer: String::new(),
                physical_dimension: "uV".into(),
                physical_min: lo,
                physical_max: hi,
                digital_min: -32768,
                digital_max: 32767,
                prefiltering: String::new(),
                samples_per_record: rate,
                reserved: String::new(),
            }],
        };
        let record = SignalRecord {
            subject_id: subject.clone(),
            recording_id: format!("{subject}1"),
            channel_label: channel.into(),
            sample_rate_hz: rate as f64,
            samples,
        };
        let hypnogram: Vec<HypnogramEntry> = epochs
            .iter()
            .map(|e| HypnogramEntry {
                onset_s: e.start_s,
                duration_s: EPOCH_SECONDS,
                raw_label: LABELS[e.stage.index()].into(),
            })
            .collect();
        let psg = dir.join(format!("{subject}1E0-PSG.edf"));
        std::fs::write(&psg, write_edf(&header, &[record])?).map_err(io(&psg))?;
        let hyp = dir.join(format!("{subject}1EC-Hypnogram.edf"));
        std::fs::write(&hyp, write_hypnogram(&hypnogram, "01.01.89", "22.00.00")).map_err(io(&hyp))?;
    }
    Ok(())
}
