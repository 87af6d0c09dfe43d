//! Sleep stages and hypnogram annotations (EDF+ time-stamped annotation lists).

use serde::{Deserialize, Serialize};
use std::fmt;

use super::edf::{EdfFile, EdfHeader, SignalMeta, ANNOTATION_LABEL};
use super::IngestError;

/// The five classification targets. Raw stage 4 is merged into `S3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SleepStage {
    Wake,
    S1,
    S2,
    S3,
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [
        SleepStage::Wake,
        SleepStage::S1,
        SleepStage::S2,
        SleepStage::S3,
        SleepStage::Rem,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short column name used in reports.
    pub fn short(self) -> &'static str {
        match self {
            SleepStage::Wake => "W",
            SleepStage::S1 => "S1",
            SleepStage::S2 => "S2",
            SleepStage::S3 => "S3",
            SleepStage::Rem => "REM",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Map an R&K annotation to the five-class scheme.
///
/// Accepts both the Sleep-EDF text (`"Sleep stage 2"`) and bare codes (`"2"`).
/// Movement time and unscored epochs map to `None`.
pub fn map_stage(raw_label: &str) -> Option<SleepStage> {
    let label = raw_label.trim();
    let code = label
        .strip_prefix("Sleep stage")
        .map(str::trim)
        .unwrap_or(label);
    match code {
        "W" | "w" | "0" => Some(SleepStage::Wake),
        "1" => Some(SleepStage::S1),
        "2" => Some(SleepStage::S2),
        "3" | "4" => Some(SleepStage::S3),
        "R" | "r" | "REM" | "5" => Some(SleepStage::Rem),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypnogramEntry {
    pub onset_s: f64,
    pub duration_s: f64,
    pub raw_label: String,
}

/// Decode all time-stamped annotation lists from the annotation channels of an
/// EDF+ file. Entries without a duration (record time-keeping) are dropped.
pub fn read_hypnogram(bytes: &[u8]) -> Result<Vec<HypnogramEntry>, IngestError> {
    let file = EdfFile::parse(bytes)?;
    let mut entries = Vec::new();
    for (i, meta) in file.header.signals.iter().enumerate() {
        if !meta.is_annotation() {
            continue;
        }
        let spr_bytes = meta.samples_per_record * 2;
        let raw = file.annotation_bytes(i);
        for block in raw.chunks(spr_bytes) {
            parse_tal_block(block, &mut entries)?;
        }
    }
    entries.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(entries)
}

fn parse_tal_block(block: &[u8], out: &mut Vec<HypnogramEntry>) -> Result<(), IngestError> {
    for tal in block.split(|&b| b == 0).filter(|t| !t.is_empty()) {
        let text = std::str::from_utf8(tal)
            .map_err(|_| IngestError::MalformedAnnotation("annotation is not UTF-8".into()))?;
        let mut fields = text.split('\u{14}');
        let stamp = fields.next().unwrap_or("");
        let (onset, duration) = match stamp.split_once('\u{15}') {
            Some((o, d)) => (o, Some(d)),
            None => (stamp, None),
        };
        let onset_s: f64 = onset.trim_start_matches('+').parse().map_err(|_| {
            IngestError::MalformedAnnotation(format!("bad onset {onset:?}"))
        })?;
        let Some(duration) = duration else { continue };
        let duration_s: f64 = duration
            .parse()
            .map_err(|_| IngestError::MalformedAnnotation(format!("bad duration {duration:?}")))?;
        for label in fields.filter(|l| !l.is_empty()) {
            out.push(HypnogramEntry {
                onset_s,
                duration_s,
                raw_label: label.to_string(),
            });
        }
    }
    Ok(())
}

fn format_seconds(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Write a hypnogram as an EDF+ file with a single annotation channel, in the
/// layout Sleep-EDF hypnogram files use. Used to build synthetic datasets.
pub fn write_hypnogram(
    entries: &[HypnogramEntry],
    start_date: &str,
    start_time: &str,
) -> Vec<u8> {
    let mut tals: Vec<Vec<u8>> = vec![b"+0\x14\x14\0".to_vec()];
    for e in entries {
        let mut t = format!(
            "+{}\u{15}{}\u{14}{}\u{14}",
            format_seconds(e.onset_s),
            format_seconds(e.duration_s),
            e.raw_label
        )
        .into_bytes();
        t.push(0);
        tals.push(t);
    }
    let total: usize = tals.iter().map(Vec::len).sum();
    let spr = total.div_ceil(2);
    let mut raw: Vec<u8> = tals.concat();
    raw.resize(spr * 2, 0);
    let digital = raw
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let header = EdfHeader {
        version: "0".into(),
        patient: "X".into(),
        recording: "X".into(),
        start_date: start_date.into(),
        start_time: start_time.into(),
        reserved: "EDF+C".into(),
        n_data_records: 1,
        record_duration_s: entries
            .iter()
            .map(|e| e.onset_s + e.duration_s)
            .fold(1.0, f64::max),
        signals: vec![SignalMeta {
            label: ANNOTATION_LABEL.into(),
            transducer: String::new(),
            physical_dimension: String::new(),
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: -32768,
            digital_max: 32767,
            prefiltering: String::new(),
            samples_per_record: spr,
            reserved: String::new(),
        }],
    };
    EdfFile {
        header,
        digital: vec![digital],
    }
    .to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_mapping() {
        assert_eq!(map_stage("Sleep stage 4"), Some(SleepStage::S3));
        assert_eq!(map_stage("Sleep stage W"), Some(SleepStage::Wake));
        assert_eq!(map_stage("Sleep stage 1"), Some(SleepStage::S1));
        assert_eq!(map_stage("Sleep stage 2"), Some(SleepStage::S2));
        assert_eq!(map_stage("Sleep stage 3"), Some(SleepStage::S3));
        assert_eq!(map_stage("Sleep stage R"), Some(SleepStage::Rem));
        assert_eq!(map_stage("Movement time"), None);
        assert_eq!(map_stage("Sleep stage ?"), None);
        assert_eq!(map_stage("?"), None);
        assert_eq!(map_stage("R"), Some(SleepStage::Rem));
    }

    #[test]
    fn stage_index_roundtrip() {
        for s in SleepStage::ALL {
            assert_eq!(SleepStage::from_index(s.index()), Some(s));
        }
        assert_eq!(SleepStage::from_index(5), None);
    }

    #[test]
    fn hypnogram_roundtrip_through_edf_plus() {
        let entries = vec![
            HypnogramEntry {
                onset_s: 0.0,
                duration_s: 60.0,
                raw_label: "Sleep stage W".into(),
            },
            HypnogramEntry {
                onset_s: 60.0,
                duration_s: 30.0,
                raw_label: "Sleep stage 2".into(),
            },
            HypnogramEntry {
                onset_s: 90.0,
                duration_s: 12.5,
                raw_label: "Movement time".into(),
            },
        ];
        let bytes = write_hypnogram(&entries, "24.04.89", "16.13.00");
        assert_eq!(read_hypnogram(&bytes).unwrap(), entries);
    }

    #[test]
    fn time_keeping_tals_are_skipped() {
        let mut out = Vec::new();
        parse_tal_block(b"+0\x14\x14\0+30\x1530\x14Sleep stage 1\x14\0\0\0", &mut out).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].onset_s, 30.0);
        assert_eq!(out[0].raw_label, "Sleep stage 1");
    }
}
