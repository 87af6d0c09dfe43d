//! Combine a self-contrast and a cross-subject backbone at several weights
//! in both modes, fine-tune each combination and score it.

use mvitime::augment::AugmentConfig;
use mvitime::eval::{evaluate, loso_split};
use mvitime::model::{CombineMode, ModelConfig};
use mvitime::synthetic::{synthetic_dataset, SyntheticSpec};
use mvitime::train::{combine_backbones, finetune_network, pretrain_cross_subject, pretrain_self, RunOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_dataset(&SyntheticSpec {
        subjects: 5,
        epochs_per_subject: 30,
        epoch_len: 120,
        seed: 6,
        ..Default::default()
    });
    let (train, test) = loso_split(&data, "SC404")?;
    let mut cfg = TrainConfig::default();
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.base_lr = 0.05;
    cfg.pretrain.total_steps = 60;
    cfg.finetune.batch_size = 32;
    cfg.finetune.base_lr = 0.05;
    cfg.finetune.total_steps = 100;
    let model = ModelConfig::tiny(data.epoch_len);
    let aug = AugmentConfig::default();
    let opts = RunOptions::default();
    let own = pretrain_self(&train, model.clone(), &cfg, &aug, &opts)?.network;
    let cross = pretrain_cross_subject(&train, model, &cfg, &aug, data.epoch_len, &opts)?.network;

    println!("{:<9} {:>5} {:>8} {:>8}", "mode", "alpha", "acc %", "F1 %");
    for mode in [CombineMode::Features, CombineMode::Full] {
        for alpha in [0.0, 0.5, 1.0] {
            let c = combine_backbones(own.clone(), cross.clone(), alpha, mode, cfg.seed)?;
            let t = finetune_network(c, &train, &cfg, "finetune-combined", &opts)?;
            let (_, m) = evaluate(&t.network, &test)?;
            println!("{:<9} {alpha:>5.1} {:>8.1} {:>8.1}", format!("{mode:?}"), 100.0 * m.accuracy, 100.0 * m.macro_f1);
        }
    }
    Ok(())
}
