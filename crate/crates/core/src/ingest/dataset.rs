//! Directory-level ingestion of Sleep-EDF style recordings and the dataset
//! manifest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::edf::{parse_edf, EdfHeader};
use super::epochs::{dataset_summary, epoch_length, segment_epochs, trim_wake, Epoch, StageShare};
use super::hypnogram::{read_hypnogram, SleepStage};
use super::IngestError;

/// Labeled epochs sharing one sampling rate and epoch length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub sample_rate_hz: f64,
    pub epoch_len: usize,
    pub epochs: Vec<Epoch>,
}

impl Dataset {
    pub fn new(sample_rate_hz: f64, epoch_len: usize, epochs: Vec<Epoch>) -> Self {
        Self {
            sample_rate_hz,
            epoch_len,
            epochs,
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| e.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Epochs grouped by subject, each group in original (temporal) order.
    pub fn by_subject(&self) -> BTreeMap<String, Vec<&Epoch>> {
        let mut map: BTreeMap<String, Vec<&Epoch>> = BTreeMap::new();
        for e in &self.epochs {
            map.entry(e.subject_id.clone()).or_default().push(e);
        }
        map
    }

    /// Sub-dataset restricted to (or excluding) a set of subjects.
    pub fn select(&self, subjects: &BTreeSet<String>, keep: bool) -> Dataset {
        Dataset {
            sample_rate_hz: self.sample_rate_hz,
            epoch_len: self.epoch_len,
            epochs: self
                .epochs
                .iter()
                .filter(|e| subjects.contains(&e.subject_id) == keep)
                .cloned()
                .collect(),
        }
    }
}

/// Which subjects of a Sleep-EDF directory to ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    /// Sleep Cassette subjects 00–19 (Sleep-EDF-2013).
    Edf20,
    /// All Sleep Cassette subjects (Sleep-EDF-2018).
    Edf78,
    /// Every recording found.
    All,
    Custom(Vec<String>),
}

impl Subset {
    pub fn admits(&self, subject: &str) -> bool {
        match self {
            Subset::All => true,
            Subset::Custom(list) => list.iter().any(|s| s == subject),
            Subset::Edf20 | Subset::Edf78 => match sleep_cassette_number(subject) {
                Some(n) => *self == Subset::Edf78 || n < 20,
                None => false,
            },
        }
    }
}

fn sleep_cassette_number(subject: &str) -> Option<u32> {
    subject.strip_prefix("SC4")?.get(..2)?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub channel: String,
    /// Minutes of Wake kept on each side of the sleep period; `None` keeps all.
    pub trim_min: Option<usize>,
    pub subset: Subset,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            channel: "EEG Fpz-Cz".into(),
            trim_min: Some(30),
            subset: Subset::All,
        }
    }
}

/// Subject id from a Sleep-EDF file name: `SC4ssNx` → `SC4ss`, `ST7ssNx` →
/// `ST7ss`. Other names use the part before the first `-`.
pub fn subject_of(file_name: &str) -> String {
    let stem = file_name.split('-').next().unwrap_or(file_name);
    let bytes = stem.as_bytes();
    let sleep_edf = bytes.len() >= 6
        && (stem.starts_with("SC4") || stem.starts_with("ST7"))
        && bytes[3..5].iter().all(u8::is_ascii_digit);
    if sleep_edf {
        stem[..5].to_string()
    } else {
        stem.to_string()
    }
}

fn stem_prefix(name: &str) -> &str {
    name.split('-').next().unwrap_or(name)
}

fn drop_last(s: &str) -> &str {
    let mut chars = s.chars();
    chars.next_back();
    chars.as_str()
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub recordings: Vec<String>,
    pub epochs: usize,
    pub stages: BTreeMap<SleepStage, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDiff {
    pub reference: String,
    pub expected_total: usize,
    pub actual_total: usize,
    pub expected: BTreeMap<SleepStage, usize>,
    pub actual: BTreeMap<SleepStage, usize>,
}

/// Published per-stage epoch counts for the two standard Sleep-EDF subsets.
pub fn reference_counts(subset: &Subset) -> Option<(&'static str, [usize; 5])> {
    match subset {
        Subset::Edf20 => Some(("Sleep-EDF-20", [8285, 2804, 17799, 5703, 7717])),
        Subset::Edf78 => Some(("Sleep-EDF-78", [65951, 21522, 69132, 13039, 25835])),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_digest: String,
    pub channel: String,
    pub trim_min: Option<usize>,
    pub sample_rate_hz: f64,
    pub epoch_len: usize,
    pub total_epochs: usize,
    pub subjects: Vec<SubjectSummary>,
    pub class_distribution: BTreeMap<SleepStage, StageShare>,
    /// Raw labels of skipped 30-s windows (movement, unscored).
    pub excluded: BTreeMap<String, usize>,
    /// Recordings without any sleep epoch, left untrimmed.
    pub all_wake_recordings: Vec<String>,
    pub reference: Option<ReferenceDiff>,
}

impl Manifest {
    fn build(dataset: &Dataset, opts: &IngestOptions, recordings: &[Recording]) -> Self {
        let mut subjects: BTreeMap<String, SubjectSummary> = BTreeMap::new();
        let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
        let mut all_wake = Vec::new();
        for rec in recordings {
            let entry = subjects
                .entry(rec.subject_id.clone())
                .or_insert_with(|| SubjectSummary {
                    subject_id: rec.subject_id.clone(),
                    recordings: Vec::new(),
                    epochs: 0,
                    stages: SleepStage::ALL.iter().map(|&s| (s, 0)).collect(),
                });
            entry.recordings.push(rec.recording_id.clone());
            entry.epochs += rec.epochs.len();
            for e in &rec.epochs {
                *entry.stages.get_mut(&e.stage).expect("all stages present") += 1;
            }
            for (label, n) in &rec.excluded {
                *excluded.entry(label.clone()).or_default() += n;
            }
            if rec.all_wake {
                all_wake.push(rec.recording_id.clone());
            }
        }
        let class_distribution = dataset_summary(&dataset.epochs);
        let reference = reference_counts(&opts.subset).map(|(name, counts)| ReferenceDiff {
            reference: name.to_string(),
            expected_total: counts.iter().sum(),
            actual_total: dataset.len(),
            expected: SleepStage::ALL.iter().map(|&s| (s, counts[s.index()])).collect(),
            actual: class_distribution.iter().map(|(&s, v)| (s, v.count)).collect(),
        });
        Manifest {
            seed: 0,
            config_digest: String::new(),
            channel: opts.channel.clone(),
            trim_min: opts.trim_min,
            sample_rate_hz: dataset.sample_rate_hz,
            epoch_len: dataset.epoch_len,
            total_epochs: dataset.len(),
            subjects: subjects.into_values().collect(),
            class_distribution,
            excluded,
            all_wake_recordings: all_wake,
            reference,
        }
    }
}

/// Epochs of one PSG/hypnogram pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub recording_id: String,
    pub sample_rate_hz: f64,
    pub epochs: Vec<Epoch>,
    pub excluded: BTreeMap<String, usize>,
    /// No sleep epoch was found, so Wake trimming left the recording as is.
    pub all_wake: bool,
}

/// Load one PSG/hypnogram pair. Hypnogram onsets are shifted by the start-time
/// difference between the two files.
pub fn load_recording(
    psg: &[u8],
    hypnogram: &[u8],
    subject_id: &str,
    recording_id: &str,
    opts: &IngestOptions,
) -> Result<Recording, IngestError> {
    let (header, records) = parse_edf(psg)?;
    let idx = header
        .signal_index(&opts.channel)
        .ok_or_else(|| IngestError::MissingChannel {
            channel: opts.channel.clone(),
            recording: recording_id.to_string(),
        })?;
    let mut signal = records.into_iter().nth(idx).expect("index from header");
    signal.subject_id = subject_id.to_string();
    signal.recording_id = recording_id.to_string();

    let mut entries = read_hypnogram(hypnogram)?;
    let offset = hypnogram_offset(&header, hypnogram);
    if offset != 0.0 {
        for e in &mut entries {
            e.onset_s += offset;
        }
        entries.retain(|e| e.onset_s >= 0.0);
    }
    let seg = segment_epochs(&signal, &entries)?;
    let (epochs, all_wake) = match opts.trim_min {
        Some(m) => {
            let t = trim_wake(seg.epochs, m);
            (t.epochs, t.all_wake)
        }
        None => (seg.epochs, false),
    };
    Ok(Recording {
        subject_id: subject_id.to_string(),
        recording_id: recording_id.to_string(),
        sample_rate_hz: signal.sample_rate_hz,
        epochs,
        excluded: seg.excluded,
        all_wake,
    })
}

fn hypnogram_offset(psg: &EdfHeader, hypnogram: &[u8]) -> f64 {
    let Ok(hyp) = super::edf::EdfFile::parse(hypnogram) else {
        return 0.0;
    };
    match (hyp.header.start_seconds(), psg.start_seconds()) {
        (Some(h), Some(p)) if hyp.header.start_date == psg.start_date => h - p,
        _ => 0.0,
    }
}

fn find_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, IngestError> {
    let entries = std::fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut psgs = Vec::new();
    let mut hyps = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with("-psg.edf") {
            psgs.push(name);
        } else if lower.ends_with("-hypnogram.edf") {
            hyps.push(name);
        }
    }
    psgs.sort();
    hyps.sort();
    let mut pairs = Vec::new();
    for psg in psgs {
        let p = stem_prefix(&psg);
        let hyp = hyps
            .iter()
            .find(|h| stem_prefix(h) == p)
            .or_else(|| hyps.iter().find(|h| drop_last(stem_prefix(h)) == drop_last(p)))
            .ok_or_else(|| IngestError::MissingHypnogram(psg.clone()))?;
        pairs.push((dir.join(&psg), dir.join(hyp)));
    }
    Ok(pairs)
}

/// Ingest every PSG/hypnogram pair in `dir` admitted by the subset selector.
/// Files are parsed in parallel; output order follows sorted file names.
pub fn ingest_dir(dir: &Path, opts: &IngestOptions) -> Result<(Dataset, Manifest), IngestError> {
    let pairs: Vec<_> = find_pairs(dir)?
        .into_iter()
        .filter(|(psg, _)| {
            let name = psg.file_name().unwrap_or_default().to_string_lossy();
            opts.subset.admits(&subject_of(&name))
        })
        .collect();
    if pairs.is_empty() {
        return Err(IngestError::NoRecordings(dir.display().to_string()));
    }

    let recordings: Vec<Recording> = pairs
        .par_iter()
        .map(|(psg, hyp)| {
            let name = psg.file_name().unwrap_or_default().to_string_lossy().to_string();
            let subject_id = subject_of(&name);
            let recording_id = stem_prefix(&name).to_string();
            load_recording(&read(psg)?, &read(hyp)?, &subject_id, &recording_id, opts)
        })
        .collect::<Result<_, IngestError>>()?;

    let rate = recordings[0].sample_rate_hz;
    if let Some(bad) = recordings.iter().find(|r| r.sample_rate_hz != rate) {
        return Err(IngestError::SampleRateMismatch {
            recording: bad.recording_id.clone(),
            expected: rate,
            found: bad.sample_rate_hz,
        });
    }
    let epoch_len = epoch_length(rate).ok_or(IngestError::NonIntegralEpoch(rate))?;
    let dataset = Dataset::new(
        rate,
        epoch_len,
        recordings.iter().flat_map(|r| r.epochs.iter().cloned()).collect(),
    );
    let manifest = Manifest::build(&dataset, opts, &recordings);
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_ids_from_file_names() {
        assert_eq!(subject_of("SC4001E0-PSG.edf"), "SC400");
        assert_eq!(subject_of("SC4131EC-Hypnogram.edf"), "SC413");
        assert_eq!(subject_of("ST7011J0-PSG.edf"), "ST701");
        assert_eq!(subject_of("night1-PSG.edf"), "night1");
    }

    #[test]
    fn subset_selection() {
        assert!(Subset::Edf20.admits("SC419"));
        assert!(!Subset::Edf20.admits("SC420"));
        assert!(Subset::Edf78.admits("SC482"));
        assert!(!Subset::Edf78.admits("ST701"));
        assert!(Subset::Custom(vec!["a".into()]).admits("a"));
        assert!(!Subset::Custom(vec!["a".into()]).admits("b"));
    }

    #[test]
    fn reference_table_totals() {
        let (_, c20) = reference_counts(&Subset::Edf20).unwrap();
        assert_eq!(c20.iter().sum::<usize>(), 42308);
        let (_, c78) = reference_counts(&Subset::Edf78).unwrap();
        assert_eq!(c78.iter().sum::<usize>(), 195479);
        let wake = c78[0] as f64 / 195479.0;
        assert!((wake - 0.337).abs() < 5e-4);
    }
}
