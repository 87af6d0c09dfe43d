//! Principal component analysis via the SVD of the centered data matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ContrastiveError;

/// Mean vector plus orthonormal principal directions.
///
/// When more components are requested than the data has numerical rank, only
/// the available ones are kept, `rank_deficient` is set and [`PcaBasis::project`]
/// zero-fills the missing coordinates so the output width is always `requested`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Principal directions, each of length `mean.len()`.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each direction, non-increasing.
    pub explained_variance: Vec<f64>,
    pub requested: usize,
    pub rank_deficient: bool,
}

impl PcaBasis {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            components: (0..p)
                .map(|i| {
                    let mut e = vec![0.0; p];
                    e[i] = 1.0;
                    e
                })
                .collect(),
            explained_variance: vec![1.0; p],
            requested: p,
            rank_deficient: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, ContrastiveError> {
        if x.len() != self.mean.len() {
            return Err(ContrastiveError::DimensionMismatch(format!(
                "PCA input of width {}, basis expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect();
        out.resize(self.requested, 0.0);
        Ok(out)
    }

    /// Map projected coordinates back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += w * ci;
            }
        }
        x
    }
}

/// Fit `k` principal components to the rows of `x` (`m` samples of width `p`).
pub fn pca_fit(x: &[Vec<f64>], k: usize) -> Result<PcaBasis, ContrastiveError> {
    let m = x.len();
    if m < 2 {
        return Err(ContrastiveError::InvalidPca(format!("need at least 2 rows, got {m}")));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(ContrastiveError::InvalidPca("rows must share a nonzero width".into()));
    }
    if k == 0 {
        return Err(ContrastiveError::InvalidPca("k must be at least 1".into()));
    }
    if let Some(row) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(ContrastiveError::NonFinite { row });
    }
    let mut mean = vec![0.0; p];
    for r in x {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered = DMatrix::from_fn(m, p, |i, j| x[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sv = &svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let top = sv.iter().copied().fold(0.0, f64::max);
    let tol = top * (m.max(p) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&i| sv[i] > tol).count();

    let kept = k.min(rank);
    let mut components = Vec::with_capacity(kept);
    let mut explained_variance = Vec::with_capacity(kept);
    for &i in &order[..kept] {
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let big = c.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(sv[i] * sv[i] / (m - 1) as f64);
    }
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        requested: k,
        rank_deficient: k > rank,
    })
}
