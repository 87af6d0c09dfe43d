//! EDF / EDF+ container: fixed-width ASCII header followed by data records of
//! 16-bit little-endian two's-complement samples.
//!
//! Only what Sleep-EDF recordings need is supported: continuous recordings,
//! ordinary signals, and `EDF Annotations` channels carried as raw bytes.

use super::IngestError;

const FIXED_HEADER: usize = 256;
const PER_SIGNAL_HEADER: usize = 256;

/// Label EDF+ uses for annotation channels.
pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Clone, PartialEq)]
pub struct SignalMeta {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalMeta {
    /// Physical units per digital step.
    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    /// Linear map taking `digital_min` to `physical_min` and `digital_max` to
    /// `physical_max`, both exactly.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let t = (f64::from(digital) - f64::from(self.digital_min))
            / f64::from(self.digital_max - self.digital_min);
        self.physical_min * (1.0 - t) + self.physical_max * t
    }

    /// Inverse of [`SignalMeta::to_physical`], rounded to the nearest digital
    /// step and clamped to the 16-bit range.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let d = (physical - self.physical_min) / self.gain() + f64::from(self.digital_min);
        d.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
    }

    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    fn validate(&self, index: usize) -> Result<(), IngestError> {
        if self.digital_min == self.digital_max {
            return Err(IngestError::DegenerateScale { signal: index });
        }
        if self.digital_min > self.digital_max || self.physical_min == self.physical_max {
            return Err(IngestError::MalformedHeader(format!(
                "signal {index} ({}) has an invalid physical/digital range",
                self.label
            )));
        }
        if self.samples_per_record == 0 {
            return Err(IngestError::MalformedHeader(format!(
                "signal {index} ({}) has zero samples per record",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    /// dd.mm.yy
    pub start_date: String,
    /// hh.mm.ss
    pub start_time: String,
    pub reserved: String,
    pub n_data_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalMeta>,
}

impl EdfHeader {
    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER + PER_SIGNAL_HEADER * self.signals.len()
    }

    pub fn sample_rate(&self, signal: usize) -> f64 {
        self.signals[signal].samples_per_record as f64 / self.record_duration_s
    }

    fn record_bytes(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record * 2).sum()
    }

    /// Seconds since midnight of the start time, if it parses.
    pub fn start_seconds(&self) -> Option<f64> {
        let mut parts = self.start_time.trim().split('.');
        let h: f64 = parts.next()?.trim().parse().ok()?;
        let m: f64 = parts.next()?.trim().parse().ok()?;
        let s: f64 = parts.next()?.trim().parse().ok()?;
        Some(h * 3600.0 + m * 60.0 + s)
    }

    pub fn signal_index(&self, label: &str) -> Option<usize> {
        self.signals.iter().position(|s| s.label.trim() == label.trim())
    }
}

/// One channel of one recording, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    pub recording_id: String,
    pub channel_label: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

/// Parsed file with the digital samples kept per signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub digital: Vec<Vec<i16>>,
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, IngestError> {
        let header = parse_header(bytes)?;
        let start = header.header_bytes();
        let needed = start + header.n_data_records * header.record_bytes();
        if bytes.len() < needed {
            return Err(IngestError::TruncatedData {
                expected: needed,
                actual: bytes.len(),
            });
        }

        let mut digital: Vec<Vec<i16>> = header
            .signals
            .iter()
            .map(|s| Vec::with_capacity(s.samples_per_record * header.n_data_records))
            .collect();
        let mut offset = start;
        for _ in 0..header.n_data_records {
            for (meta, out) in header.signals.iter().zip(digital.iter_mut()) {
                let chunk = &bytes[offset..offset + meta.samples_per_record * 2];
                out.extend(chunk.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
                offset += chunk.len();
            }
        }
        Ok(Self { header, digital })
    }

    /// Raw bytes of an annotation channel, concatenated across data records.
    pub fn annotation_bytes(&self, signal: usize) -> Vec<u8> {
        self.digital[signal]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_to_bytes(&self.header);
        let n = self.header.n_data_records;
        for r in 0..n {
            for (meta, samples) in self.header.signals.iter().zip(&self.digital) {
                let spr = meta.samples_per_record;
                for v in &samples[r * spr..(r + 1) * spr] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}

/// Parse an EDF file into its header and one physical-unit record per signal.
///
/// Subject and recording ids are taken from the first token of the patient and
/// recording header fields; directory ingestion overrides them with ids
/// derived from file names.
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, Vec<SignalRecord>), IngestError> {
    let file = EdfFile::parse(bytes)?;
    let subject_id = first_token(&file.header.patient);
    let recording_id = first_token(&file.header.recording);
    let records = file
        .header
        .signals
        .iter()
        .zip(&file.digital)
        .enumerate()
        .map(|(i, (meta, digital))| SignalRecord {
            subject_id: subject_id.clone(),
            recording_id: recording_id.clone(),
            channel_label: meta.label.trim().to_string(),
            sample_rate_hz: file.header.sample_rate(i),
            samples: digital.iter().map(|&d| meta.to_physical(d)).collect(),
        })
        .collect();
    Ok((file.header, records))
}

/// Serialize a header and physical-unit records back into EDF bytes.
///
/// Physical samples are mapped back to the nearest digital step, so
/// `write_edf(parse_edf(f))` reproduces `f` for any file this writer produced.
pub fn write_edf(header: &EdfHeader, records: &[SignalRecord]) -> Result<Vec<u8>, IngestError> {
    if records.len() != header.signals.len() {
        return Err(IngestError::MalformedHeader(format!(
            "{} records for {} signals",
            records.len(),
            header.signals.len()
        )));
    }
    let mut digital = Vec::with_capacity(records.len());
    for (i, (meta, rec)) in header.signals.iter().zip(records).enumerate() {
        meta.validate(i)?;
        let expected = meta.samples_per_record * header.n_data_records;
        if rec.samples.len() != expected {
            return Err(IngestError::TruncatedData {
                expected,
                actual: rec.samples.len(),
            });
        }
        digital.push(rec.samples.iter().map(|&p| meta.to_digital(p)).collect());
    }
    Ok(EdfFile {
        header: header.clone(),
        digital,
    }
    .to_bytes())
}

fn first_token(s: &str) -> String {
    s.split_whitespace().next().unwrap_or("").to_string()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, width: usize, what: &str) -> Result<&'a str, IngestError> {
        let end = self.pos + width;
        let raw = self.bytes.get(self.pos..end).ok_or_else(|| {
            IngestError::MalformedHeader(format!("header ends inside field `{what}`"))
        })?;
        self.pos = end;
        std::str::from_utf8(raw)
            .map_err(|_| IngestError::MalformedHeader(format!("field `{what}` is not ASCII")))
    }

    fn text(&mut self, width: usize, what: &str) -> Result<String, IngestError> {
        Ok(self.take(width, what)?.trim_end().to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, width: usize, what: &str) -> Result<T, IngestError> {
        let raw = self.take(width, what)?;
        raw.trim().parse().map_err(|_| {
            IngestError::MalformedHeader(format!("field `{what}` is not numeric: {raw:?}"))
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<EdfHeader, IngestError> {
    if bytes.len() < FIXED_HEADER {
        return Err(IngestError::MalformedHeader(format!(
            "file is {} bytes, shorter than the fixed header",
            bytes.len()
        )));
    }
    let mut c = Cursor { bytes, pos: 0 };
    let version = c.text(8, "version")?;
    let patient = c.text(80, "patient")?;
    let recording = c.text(80, "recording")?;
    let start_date = c.text(8, "start date")?;
    let start_time = c.text(8, "start time")?;
    let header_bytes: usize = c.number(8, "header bytes")?;
    let reserved = c.text(44, "reserved")?;
    let n_records: i64 = c.number(8, "number of data records")?;
    let record_duration_s: f64 = c.number(8, "record duration")?;
    let ns: usize = c.number(4, "number of signals")?;

    if n_records < 0 {
        return Err(IngestError::MalformedHeader(
            "unknown number of data records (-1) is not supported".into(),
        ));
    }
    if !(record_duration_s > 0.0 && record_duration_s.is_finite()) {
        return Err(IngestError::MalformedHeader(format!(
            "record duration must be positive, got {record_duration_s}"
        )));
    }
    let expected = FIXED_HEADER + PER_SIGNAL_HEADER * ns;
    if header_bytes != expected {
        return Err(IngestError::MalformedHeader(format!(
            "header length field says {header_bytes}, {ns} signals need {expected}"
        )));
    }
    if bytes.len() < expected {
        return Err(IngestError::MalformedHeader(format!(
            "file is {} bytes, header alone needs {expected}",
            bytes.len()
        )));
    }

    // Per-signal fields are stored column-wise: all labels, then all transducers, ...
    let mut column_text = |width: usize, what: &str| -> Result<Vec<String>, IngestError> {
        (0..ns).map(|_| c.text(width, what)).collect()
    };
    let labels = column_text(16, "label")?;
    let transducers = column_text(80, "transducer")?;
    let dims = column_text(8, "physical dimension")?;
    let mut column_num = |width: usize, what: &str| -> Result<Vec<String>, IngestError> {
        (0..ns).map(|_| c.text(width, what)).collect()
    };
    let pmins = column_num(8, "physical minimum")?;
    let pmaxs = column_num(8, "physical maximum")?;
    let dmins = column_num(8, "digital minimum")?;
    let dmaxs = column_num(8, "digital maximum")?;
    let prefilters = column_num(80, "prefiltering")?;
    let sprs = column_num(8, "samples per record")?;
    let reserveds = column_num(32, "signal reserved")?;

    fn num<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T, IngestError> {
        raw.trim().parse().map_err(|_| {
            IngestError::MalformedHeader(format!("field `{what}` is not numeric: {raw:?}"))
        })
    }

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let meta = SignalMeta {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: num(&pmins[i], "physical minimum")?,
            physical_max: num(&pmaxs[i], "physical maximum")?,
            digital_min: num(&dmins[i], "digital minimum")?,
            digital_max: num(&dmaxs[i], "digital maximum")?,
            prefiltering: prefilters[i].clone(),
            samples_per_record: num(&sprs[i], "samples per record")?,
            reserved: reserveds[i].clone(),
        };
        meta.validate(i)?;
        signals.push(meta);
    }

    Ok(EdfHeader {
        version,
        patient,
        recording,
        start_date,
        start_time,
        reserved,
        n_data_records: n_records as usize,
        record_duration_s,
        signals,
    })
}

fn push_field(out: &mut Vec<u8>, value: &str, width: usize) {
    let mut bytes: Vec<u8> = value.bytes().take(width).collect();
    bytes.resize(width, b' ');
    out.extend_from_slice(&bytes);
}

/// Shortest decimal text of `v` that fits in `width` characters.
pub(crate) fn format_number(v: f64, width: usize) -> String {
    let plain = format!("{v}");
    if plain.len() <= width {
        return plain;
    }
    for precision in (0..width).rev() {
        let s = format!("{v:.precision$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s.len() <= width {
            return s;
        }
    }
    // Integral part alone overflows the field; EDF cannot represent it.
    plain[..width].to_string()
}

fn header_to_bytes(h: &EdfHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(h.header_bytes());
    push_field(&mut out, &h.version, 8);
    push_field(&mut out, &h.patient, 80);
    push_field(&mut out, &h.recording, 80);
    push_field(&mut out, &h.start_date, 8);
    push_field(&mut out, &h.start_time, 8);
    push_field(&mut out, &h.header_bytes().to_string(), 8);
    push_field(&mut out, &h.reserved, 44);
    push_field(&mut out, &h.n_data_records.to_string(), 8);
    push_field(&mut out, &format_number(h.record_duration_s, 8), 8);
    push_field(&mut out, &h.signals.len().to_string(), 4);
    let s = &h.signals;
    s.iter().for_each(|m| push_field(&mut out, &m.label, 16));
    s.iter().for_each(|m| push_field(&mut out, &m.transducer, 80));
    s.iter().for_each(|m| push_field(&mut out, &m.physical_dimension, 8));
    s.iter().for_each(|m| push_field(&mut out, &format_number(m.physical_min, 8), 8));
    s.iter().for_each(|m| push_field(&mut out, &format_number(m.physical_max, 8), 8));
    s.iter().for_each(|m| push_field(&mut out, &m.digital_min.to_string(), 8));
    s.iter().for_each(|m| push_field(&mut out, &m.digital_max.to_string(), 8));
    s.iter().for_each(|m| push_field(&mut out, &m.prefiltering, 80));
    s.iter().for_each(|m| push_field(&mut out, &m.samples_per_record.to_string(), 8));
    s.iter().for_each(|m| push_field(&mut out, &m.reserved, 32));
    out
}
