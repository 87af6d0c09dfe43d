//! Cosine similarity, the NT-Xent objective and cross-subject features.
//!
//! A contrastive batch holds `2n` embedding rows and an involutive pairing:
//! row `i` has exactly one positive partner `pairing[i]`, and every other row
//! is a negative. Self-contrast pairs the two views of one epoch;
//! cross-subject contrast pairs the two views of one subject's feature.

mod pca;

pub use pca::{pca_fit, PcaBasis};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::augment::{make_views, AugmentConfig, AugmentError};
use crate::ingest::{Epoch, SleepStage};

#[derive(Debug, Error, PartialEq)]
pub enum ContrastiveError {
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("a contrastive batch needs at least 4 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} is not finite")]
    NonFinite { row: usize },
    #[error("subject {subject} has no {stage} epoch")]
    MissingStage { subject: String, stage: SleepStage },
    #[error("invalid PCA input: {0}")]
    InvalidPca(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64, ContrastiveError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(ContrastiveError::DimensionMismatch(format!(
            "{} vs {}",
            x.len(),
            y.len()
        )));
    }
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 {
        return Err(ContrastiveError::ZeroNorm { row: 0 });
    }
    if ny == 0.0 {
        return Err(ContrastiveError::ZeroNorm { row: 1 });
    }
    Ok(dot(x, y) / (nx * ny))
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `2n` embedding rows with their positive partners.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pairing: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(
        rows: usize,
        dim: usize,
        data: Vec<f64>,
        pairing: Vec<usize>,
    ) -> Result<Self, ContrastiveError> {
        if dim < 2 || data.len() != rows * dim {
            return Err(ContrastiveError::DimensionMismatch(format!(
                "{} values for {rows} rows of width {dim}",
                data.len()
            )));
        }
        validate_pairing(&pairing, rows)?;
        if let Some(row) = (0..rows).find(|r| data[r * dim..(r + 1) * dim].iter().any(|v| !v.is_finite())) {
            return Err(ContrastiveError::NonFinite { row });
        }
        Ok(Self {
            rows,
            dim,
            data,
            pairing,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], pairing: Vec<usize>) -> Result<Self, ContrastiveError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(ContrastiveError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat(), pairing)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }
}

fn validate_pairing(pairing: &[usize], rows: usize) -> Result<(), ContrastiveError> {
    if pairing.len() != rows {
        return Err(ContrastiveError::InvalidPairing(format!(
            "{} partners for {rows} rows",
            pairing.len()
        )));
    }
    for (i, &p) in pairing.iter().enumerate() {
        if p >= rows || p == i || pairing[p] != i {
            return Err(ContrastiveError::InvalidPairing(format!("row {i} -> {p}")));
        }
    }
    Ok(())
}

/// Pairing `0<->1, 2<->3, ...` for `rows` consecutive view rows.
pub fn interleaved_pairing(rows: usize) -> Vec<usize> {
    (0..rows).map(|i| i ^ 1).collect()
}

/// Row-major `2n x 2n` cosine similarity matrix.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Result<Vec<f64>, ContrastiveError> {
    let (units, _) = unit_rows(batch)?;
    Ok(gram(&units, batch.rows, batch.dim))
}

fn unit_rows(batch: &EmbeddingBatch) -> Result<(Vec<f64>, Vec<f64>), ContrastiveError> {
    let mut units = Vec::with_capacity(batch.data.len());
    let mut norms = Vec::with_capacity(batch.rows);
    for i in 0..batch.rows {
        let r = batch.row(i);
        let n = norm(r);
        if n == 0.0 {
            return Err(ContrastiveError::ZeroNorm { row: i });
        }
        norms.push(n);
        units.extend(r.iter().map(|v| v / n));
    }
    Ok((units, norms))
}

fn gram(units: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            s[i * rows + j] = if i == j {
                1.0
            } else {
                dot(&units[i * dim..(i + 1) * dim], &units[j * dim..(j + 1) * dim])
            };
        }
    }
    s
}

/// Row-major binary target with a single one per row at the positive partner.
pub fn positive_target(pairing: &[usize]) -> Result<Vec<u8>, ContrastiveError> {
    let n = pairing.len();
    validate_pairing(pairing, n)?;
    let mut g = vec![0u8; n * n];
    for (i, &p) in pairing.iter().enumerate() {
        g[i * n + p] = 1;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtXent {
    pub loss: f64,
    /// Gradient with respect to the raw (unnormalized) rows, row-major.
    pub grad: Vec<f64>,
}

/// NT-Xent over cosine similarities, self-terms excluded from each denominator.
pub fn nt_xent_loss(batch: &EmbeddingBatch, temperature: f64) -> Result<NtXent, ContrastiveError> {
    if !(temperature > 0.0) {
        return Err(ContrastiveError::NonPositiveTemperature(temperature));
    }
    let (m, d) = (batch.rows, batch.dim);
    if m < 4 {
        return Err(ContrastiveError::BatchTooSmall(m));
    }
    let (units, norms) = unit_rows(batch)?;
    let s = gram(&units, m, d);
    let scale = 1.0 / (m as f64 * temperature);

    // a[i][j] = dL/dS_ij
    let mut a = vec![0.0; m * m];
    let mut loss = 0.0;
    for i in 0..m {
        let row = &s[i * m..(i + 1) * m];
        let mx = (0..m)
            .filter(|&j| j != i)
            .map(|j| row[j] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| (row[j] / temperature - mx).exp())
            .sum();
        let lse = mx + z.ln();
        let p = batch.pairing[i];
        loss += lse - row[p] / temperature;
        for j in (0..m).filter(|&j| j != i) {
            a[i * m + j] = scale * (row[j] / temperature - lse).exp();
        }
        a[i * m + p] -= scale;
    }
    loss /= m as f64;

    let mut grad = vec![0.0; m * d];
    for i in 0..m {
        let mut du = vec![0.0; d];
        for j in (0..m).filter(|&j| j != i) {
            let w = a[i * m + j] + a[j * m + i];
            for (g, u) in du.iter_mut().zip(&units[j * d..(j + 1) * d]) {
                *g += w * u;
            }
        }
        let ui = &units[i * d..(i + 1) * d];
        let proj = dot(ui, &du);
        for k in 0..d {
            grad[i * d + k] = (du[k] - ui[k] * proj) / norms[i];
        }
    }
    Ok(NtXent { loss, grad })
}

/// A subject's stage-spanning feature after PCA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFeature {
    pub subject_id: String,
    pub vector: Vec<f64>,
}

/// First epoch of each stage in temporal order, for one subject.
pub fn stage_representatives<'a>(
    subject: &str,
    epochs: impl IntoIterator<Item = &'a Epoch>,
) -> Result<BTreeMap<SleepStage, &'a Epoch>, ContrastiveError> {
    let mut sorted: Vec<&Epoch> = epochs.into_iter().collect();
    sorted.sort_by(|a, b| {
        (a.recording_id.as_str(), a.start_s)
            .partial_cmp(&(b.recording_id.as_str(), b.start_s))
            .expect("finite onsets")
    });
    let mut reps = BTreeMap::new();
    for e in sorted {
        reps.entry(e.stage).or_insert(e);
    }
    for stage in SleepStage::ALL {
        if !reps.contains_key(&stage) {
            return Err(ContrastiveError::MissingStage {
                subject: subject.to_string(),
                stage,
            });
        }
    }
    Ok(reps)
}

/// The five representatives concatenated in W, S1, S2, S3, REM order.
pub fn stage_concat(
    subject: &str,
    epochs_by_stage: &BTreeMap<SleepStage, &[f32]>,
) -> Result<Vec<f64>, ContrastiveError> {
    let mut out = Vec::new();
    let mut len = None;
    for stage in SleepStage::ALL {
        let e = epochs_by_stage
            .get(&stage)
            .ok_or_else(|| ContrastiveError::MissingStage {
                subject: subject.to_string(),
                stage,
            })?;
        if *len.get_or_insert(e.len()) != e.len() {
            return Err(ContrastiveError::DimensionMismatch(format!(
                "{subject}: epochs of unequal length"
            )));
        }
        out.extend(e.iter().map(|&v| f64::from(v)));
    }
    Ok(out)
}

pub fn subject_feature(
    subject: &str,
    epochs_by_stage: &BTreeMap<SleepStage, &[f32]>,
    basis: &PcaBasis,
) -> Result<SubjectFeature, ContrastiveError> {
    let x = stage_concat(subject, epochs_by_stage)?;
    Ok(SubjectFeature {
        subject_id: subject.to_string(),
        vector: basis.project(&x)?,
    })
}

/// Augmented views in construction order with their pairing and source tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<Vec<f32>>,
    pub pairing: Vec<usize>,
    pub sources: Vec<String>,
}

/// Crop and permute each subject feature; views `2i` and `2i+1` belong to subject `i`.
pub fn build_cross_subject_batch<R: Rng + ?Sized>(
    features: &[SubjectFeature],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewBatch, ContrastiveError> {
    if features.len() < 2 {
        return Err(ContrastiveError::BatchTooSmall(2 * features.len()));
    }
    let dim = features[0].vector.len();
    let mut views = Vec::with_capacity(2 * features.len());
    let mut sources = Vec::with_capacity(2 * features.len());
    for (i, f) in features.iter().enumerate() {
        if f.vector.len() != dim {
            return Err(ContrastiveError::DimensionMismatch(format!(
                "subject {} has width {}, expected {dim}",
                f.subject_id,
                f.vector.len()
            )));
        }
        let x: Vec<f32> = f.vector.iter().map(|&v| v as f32).collect();
        let pair = make_views(i, &x, config, rng)?;
        views.push(pair.view_a);
        views.push(pair.view_b);
        sources.push(f.subject_id.clone());
        sources.push(f.subject_id.clone());
    }
    Ok(ViewBatch {
        pairing: interleaved_pairing(views.len()),
        views,
        sources,
    })
}
