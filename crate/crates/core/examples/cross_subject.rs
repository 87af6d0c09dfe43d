//! Cross-subject pre-training: stage-spanning subject features, their PCA
//! coordinates, and contrastive training on augmented views of them.

use mvitime::augment::AugmentConfig;
use mvitime::model::ModelConfig;
use mvitime::synthetic::{synthetic_dataset, SyntheticSpec};
use mvitime::train::{pretrain_cross_subject, subject_features, RunOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_dataset(&SyntheticSpec {
        subjects: 6,
        epochs_per_subject: 20,
        epoch_len: 120,
        seed: 4,
        ..Default::default()
    });
    let len = data.epoch_len;
    let (features, basis) = subject_features(&data, len)?;
    println!(
        "{} subjects, concatenations of {} samples, {} principal components kept of {} requested",
        features.len(),
        basis.input_dim(),
        basis.components.len(),
        basis.requested
    );
    let total: f64 = basis.explained_variance.iter().sum();
    for (i, v) in basis.explained_variance.iter().enumerate() {
        println!("  component {i}: {:.1}% of variance", 100.0 * v / total);
    }

    let mut cfg = TrainConfig::default();
    cfg.pretrain.batch_size = features.len();
    cfg.pretrain.base_lr = 0.05;
    cfg.pretrain.total_steps = 200;
    let t = pretrain_cross_subject(&data, ModelConfig::tiny(len), &cfg, &AugmentConfig::default(), len, &RunOptions::default())?;
    let losses = &t.report.losses;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "loss over the first 20 steps {:.4}, last 20 steps {:.4} (chance {:.4})",
        mean(&losses[..20]),
        mean(&losses[losses.len() - 20..]),
        ((2 * features.len() - 1) as f64).ln()
    );
    Ok(())
}
