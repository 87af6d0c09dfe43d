//! Cropping and Permutation: the two stochastic views used for contrastive
//! pre-training.
//!
//! Both transforms cut a signal of length `L` at `n - 1` random points into `n`
//! non-empty contiguous segments, with `n` drawn uniformly from
//! `[n_segments_min, n_segments_max]` on every call. Cropping keeps one random
//! segment and stretches it back to `L` by linear interpolation; Permutation
//! concatenates all segments in a uniformly random order.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("cannot split a signal of length {len} into {n} segments")]
    InvalidSegmentCount { n: usize, len: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    #[serde(rename = "n_min")]
    pub n_segments_min: usize,
    #[serde(rename = "n_max")]
    pub n_segments_max: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_segments_min: 2,
            n_segments_max: 8,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, len: usize) -> Result<(), AugmentError> {
        if self.n_segments_min < 2 || self.n_segments_min > self.n_segments_max {
            return Err(AugmentError::InvalidConfig(format!(
                "need 2 <= n_min <= n_max, got {}..={}",
                self.n_segments_min, self.n_segments_max
            )));
        }
        if self.n_segments_max > len {
            return Err(AugmentError::InvalidSegmentCount {
                n: self.n_segments_max,
                len,
            });
        }
        Ok(())
    }

    fn draw_n<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.n_segments_min..=self.n_segments_max)
    }
}

/// Sorted, distinct cut indices in `(0, len)` splitting `[0, len)` into `n`
/// non-empty segments.
pub fn split_points<R: Rng + ?Sized>(
    len: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, AugmentError> {
    if n < 2 || n > len {
        return Err(AugmentError::InvalidSegmentCount { n, len });
    }
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, len - 1, n - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    cuts.sort_unstable();
    Ok(cuts)
}

/// Segment boundaries `[(start, end)]` induced by sorted cut points.
pub fn segments(len: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for &c in cuts.iter().chain(std::iter::once(&len)) {
        bounds.push((start, c));
        start = c;
    }
    bounds
}

/// Linear-interpolation resample of `segment` to `len` points, with both
/// endpoints aligned.
pub fn resize_linear<T: Float>(segment: &[T], len: usize) -> Vec<T> {
    let m = segment.len();
    if m == 1 || len == 1 {
        return vec![segment[0]; len];
    }
    let scale = T::from(m - 1).unwrap() / T::from(len - 1).unwrap();
    (0..len)
        .map(|i| {
            let x = T::from(i).unwrap() * scale;
            let lo = x.floor().to_usize().unwrap().min(m - 1);
            let hi = (lo + 1).min(m - 1);
            let t = x - T::from(lo).unwrap();
            let (a, b) = (segment[lo], segment[hi]);
            a + (b - a) * t
        })
        .collect()
}

/// Cropping: keep one random segment and stretch it back to the input length.
pub fn crop_resize<T: Float, R: Rng + ?Sized>(
    samples: &[T],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<T>, AugmentError> {
    config.validate(samples.len())?;
    let n = config.draw_n(rng);
    let cuts = split_points(samples.len(), n, rng)?;
    let segs = segments(samples.len(), &cuts);
    let (start, end) = segs[rng.random_range(0..segs.len())];
    Ok(resize_linear(&samples[start..end], samples.len()))
}

/// Concatenate the segments given by `cuts` in the order `order`
/// (`order[k]` is the index of the segment placed k-th).
pub fn permute_with<T: Copy>(samples: &[T], cuts: &[usize], order: &[usize]) -> Vec<T> {
    let segs = segments(samples.len(), cuts);
    debug_assert_eq!(order.len(), segs.len());
    let mut out = Vec::with_capacity(samples.len());
    for &k in order {
        let (s, e) = segs[k];
        out.extend_from_slice(&samples[s..e]);
    }
    out
}

/// Permutation: shuffle the segments and join them back together.
pub fn permute<T: Copy, R: Rng + ?Sized>(
    samples: &[T],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<T>, AugmentError> {
    config.validate(samples.len())?;
    let n = config.draw_n(rng);
    let cuts = split_points(samples.len(), n, rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(permute_with(samples, &cuts, &order))
}

/// Two views of one source signal: `view_a` is cropped, `view_b` permuted.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair<T> {
    pub anchor_index: usize,
    pub view_a: Vec<T>,
    pub view_b: Vec<T>,
}

pub fn make_views<T: Float, R: Rng + ?Sized>(
    anchor_index: usize,
    samples: &[T],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair<T>, AugmentError> {
    let view_a = crop_resize(samples, config, rng)?;
    let view_b = permute(samples, config, rng)?;
    Ok(ViewPair {
        anchor_index,
        view_a,
        view_b,
    })
}
