//! Polysomnography ingestion: EDF parsing, hypnogram decoding, stage mapping
//! and segmentation into 30-second epochs.

mod dataset;
pub mod edf;
mod epochs;
mod hypnogram;

pub use dataset::{
    ingest_dir, load_recording, reference_counts, subject_of, Dataset, IngestOptions, Manifest,
    Recording, ReferenceDiff, SubjectSummary, Subset,
};
pub use edf::{parse_edf, write_edf, EdfFile, EdfHeader, SignalMeta, SignalRecord};
pub use epochs::{
    dataset_summary, epoch_length, segment_epochs, trim_wake, Epoch, Segmentation, StageShare,
    Trimmed, EPOCH_SECONDS,
};
pub use hypnogram::{map_stage, read_hypnogram, write_hypnogram, HypnogramEntry, SleepStage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed EDF header: {0}")]
    MalformedHeader(String),
    #[error("truncated EDF data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("signal {signal} has digital_min == digital_max")]
    DegenerateScale { signal: usize },
    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),
    #[error("hypnogram of {recording} needs {needed_s} s of signal, only {available_s} s recorded")]
    CoverageGap {
        recording: String,
        needed_s: f64,
        available_s: f64,
    },
    #[error("sampling rate {0} Hz does not give a whole number of samples per 30-s epoch")]
    NonIntegralEpoch(f64),
    #[error("sampling rate mismatch: {recording} is {found} Hz, dataset is {expected} Hz")]
    SampleRateMismatch {
        recording: String,
        expected: f64,
        found: f64,
    },
    #[error("channel {channel:?} not found in {recording}")]
    MissingChannel { channel: String, recording: String },
    #[error("no hypnogram found for {0}")]
    MissingHypnogram(String),
    #[error("no recordings matched in {0}")]
    NoRecordings(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
