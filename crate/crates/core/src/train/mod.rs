//! Contrastive pre-training, fine-tuning and backbone combination.
//!
//! Every stage runs the same loop: draw a batch from a seeded [`Sampler`],
//! build a graph, backpropagate a scalar loss and apply [`sgd_step`] with the
//! [`cosine_warmup_lr`] schedule. Batch composition and augmentation draws
//! depend only on `(seed, step)`, so a run resumed from a checkpoint follows
//! the same trajectory as an uninterrupted one.

mod combine;
mod loops;

pub use crate::model::CombineMode;
pub use combine::{combine_backbones, CombinedModel, Network};
pub use loops::{
    contrastive_loss, finetune, finetune_network, fresh_model, pretrain_cross_subject, pretrain_self,
    subject_features,
    Periodic, RunOptions, Trained,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use thiserror::Error;

use crate::augment::AugmentError;
use crate::contrastive::ContrastiveError;
use crate::model::ModelError;
use crate::nn::{cst, NnError, Scalar, Tensor};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("subjects missing a stage: {}", subjects.join(", "))]
    MissingStage { subjects: Vec<String> },
    #[error("cross-subject pre-training needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("backbones cannot be combined: {0}")]
    DimMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Batch size and learning-rate schedule of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub total_steps: usize,
    /// Defaults to 5% of `total_steps` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
}

impl StageConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            total_steps: self.total_steps,
            warmup_steps: self
                .warmup_steps
                .unwrap_or((self.total_steps as f64 * 0.05).round() as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub combine_alpha: f64,
    /// Rescale the full gradient to at most this L2 norm before each update.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: StageConfig {
                batch_size: 128,
                base_lr: 0.1,
                total_steps: 2000,
                warmup_steps: None,
            },
            finetune: StageConfig {
                batch_size: 512,
                base_lr: 0.01,
                total_steps: 2000,
                warmup_steps: None,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.5,
            combine_alpha: 0.5,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if s.batch_size < 2 {
                return bad(format!("{name}.batch_size must be at least 2"));
            }
            if !(s.base_lr >= 0.0) {
                return bad(format!("{name}.base_lr must be non-negative"));
            }
            if s.schedule().warmup_steps > s.total_steps {
                return bad(format!("{name}.warmup_steps exceeds total_steps"));
            }
        }
        if !(0.0..=1.0).contains(&self.combine_alpha) {
            return bad(format!("combine_alpha {} outside [0, 1]", self.combine_alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warm-up from 0 to `base_lr`, then half-cosine decay to 0.
pub fn cosine_warmup_lr(step: usize, s: &Schedule) -> Result<f64, TrainError> {
    if step > s.total_steps || s.warmup_steps > s.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return Ok(s.base_lr);
    }
    let t = (step - s.warmup_steps) as f64 / span as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

/// SGD with momentum and L2 weight decay:
/// `v = m*v + g + w*theta; theta -= lr*v`. Parameters without a gradient
/// (`None`) are left untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    velocity: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} params, {} velocities, {} gradients",
            params.len(),
            velocity.len(),
            grads.len()
        ))
        .into());
    }
    let (lr, m, w) = (cst::<T>(lr), cst::<T>(momentum), cst::<T>(weight_decay));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let Some(g) = g else { continue };
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            ))
            .into());
        }
        for ((th, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + *gi + w * *th;
            *th = *th - lr * *vi;
        }
    }
    Ok(())
}

/// Scale all gradients by one factor so their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = cst::<T>(max_norm / norm);
        for v in grads.iter_mut().flatten().flat_map(|t| t.data_mut()) {
            *v = *v * k;
        }
    }
    norm
}

/// Sampling without replacement, reshuffled every pass over the data.
///
/// Position `k` of the infinite index stream lies in pass `k / n`, whose
/// order is a permutation seeded by `(seed, pass)`. Any step's batch can be
/// recomputed without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct Sampler {
    n: usize,
    seed: u64,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed }
    }

    fn pass(&self, p: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut stream(self.seed, "batch", p as u64));
        order
    }

    /// Indices of batch `step` of size `size`.
    pub fn batch(&self, step: usize, size: usize) -> Vec<usize> {
        let start = step * size;
        let mut out = Vec::with_capacity(size);
        let mut p = start / self.n;
        let mut order = self.pass(p);
        for k in start..start + size {
            if k / self.n != p {
                p = k / self.n;
                order = self.pass(p);
            }
            out.push(order[k % self.n]);
        }
        out
    }
}

/// Per-step record of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Training accuracy per step (fine-tuning only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accuracies: Vec<f64>,
    pub final_loss: f64,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub config_digest: String,
    /// Subjects whose epochs were used in this stage.
    pub subjects: BTreeSet<String>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `step,lr,loss[,accuracy]` lines.
    pub fn to_csv(&self) -> String {
        let acc = !self.accuracies.is_empty();
        let mut out = String::from(if acc { "step,lr,loss,accuracy\n" } else { "step,lr,loss\n" });
        for (i, (l, lr)) in self.losses.iter().zip(&self.learning_rates).enumerate() {
            out.push_str(&format!("{i},{lr},{l}"));
            if acc {
                out.push_str(&format!(",{}", self.accuracies[i]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            base_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
        }
    }

    #[test]
    fn clipping_rescales_jointly() {
        let mut g = vec![
            Some(Tensor::<f64>::new([2], vec![3.0, 0.0]).unwrap()),
            None,
            Some(Tensor::<f64>::new([1], vec![4.0]).unwrap()),
        ];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 0.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn schedule_landmarks() {
        let s = sched();
        assert_eq!(cosine_warmup_lr(0, &s).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(10, &s).unwrap(), 0.1);
        assert!(cosine_warmup_lr(110, &s).unwrap().abs() < 1e-15);
        assert!((cosine_warmup_lr(60, &s).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_warmup_lr(111, &s).is_err());
        let mut prev = 0.0;
        for step in 0..=110 {
            let lr = cosine_warmup_lr(step, &s).unwrap();
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= 0.0101, "jump at {step}");
            prev = lr;
        }
    }

    #[test]
    fn default_warmup_is_five_percent() {
        let c = TrainConfig::default();
        assert_eq!(c.pretrain.schedule().warmup_steps, 100);
        c.validate().unwrap();
    }

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_sgd_and_zero_lr() {
        let mut p = one(1.0);
        let mut v = vec![one(0.0)];
        sgd_step(&mut [&mut p], &mut v, &[Some(one(0.5))], 0.1, 0.0, 0.0).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        let mut q = one(2.0);
        let mut v = vec![one(1.0)];
        sgd_step(&mut [&mut q], &mut v, &[Some(one(0.5))], 0.0, 0.9, 0.1).unwrap();
        assert_eq!(q.data()[0], 2.0);
        assert!((v[0].data()[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn quadratic_momentum_trajectory() {
        // f = theta^2, g = 2 theta, lr 0.1, m 0.9
        let mut th = one(1.0);
        let mut v = vec![one(0.0)];
        let g = |t: &Tensor<f64>| Some(one(2.0 * t.data()[0]));
        let g0 = g(&th);
        sgd_step(&mut [&mut th], &mut v, &[g0], 0.1, 0.9, 0.0).unwrap();
        // v1 = 2, theta1 = 0.8
        assert!((th.data()[0] - 0.8).abs() < 1e-15);
        let g1 = g(&th);
        sgd_step(&mut [&mut th], &mut v, &[g1], 0.1, 0.9, 0.0).unwrap();
        // v2 = 0.9*2 + 1.6 = 3.4, theta2 = 0.8 - 0.34 = 0.46
        assert!((v[0].data()[0] - 3.4).abs() < 1e-15);
        assert!((th.data()[0] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn sampler_covers_each_pass() {
        let s = Sampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|k| s.batch(k, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch(7, 3), Sampler::new(10, 3).batch(7, 3));
        assert_ne!(s.pass(0), s.pass(1));
        assert_eq!(s.batch(0, 25).len(), 25);
    }
}
