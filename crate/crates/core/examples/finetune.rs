//! Fine-tune from scratch and after self-contrast pre-training, then score
//! both on a held-out subject.

use mvitime::augment::AugmentConfig;
use mvitime::eval::{evaluate, loso_split};
use mvitime::model::ModelConfig;
use mvitime::synthetic::{synthetic_dataset, SyntheticSpec};
use mvitime::train::{finetune, fresh_model, pretrain_self, RunOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_dataset(&SyntheticSpec {
        subjects: 4,
        epochs_per_subject: 50,
        epoch_len: 128,
        seed: 5,
        ..Default::default()
    });
    let (train, test) = loso_split(&data, "SC403")?;
    let mut cfg = TrainConfig::default();
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.base_lr = 0.05;
    cfg.pretrain.total_steps = 100;
    cfg.finetune.batch_size = 32;
    cfg.finetune.base_lr = 0.05;
    cfg.finetune.total_steps = 150;
    let model = ModelConfig::tiny(data.epoch_len);
    let opts = RunOptions::default();

    let scratch = finetune(fresh_model(model.clone(), &train, cfg.seed)?, &train, &cfg, &opts)?;
    let pre = pretrain_self(&train, model, &cfg, &AugmentConfig::default(), &opts)?;
    let tuned = finetune(pre.network, &train, &cfg, &opts)?;
    for (name, t) in [("from scratch", &scratch), ("pre-trained", &tuned)] {
        let (_, m) = evaluate(&t.network, &test)?;
        let train_acc = t.report.accuracies.last().copied().unwrap_or(f64::NAN);
        println!(
            "{name:>12}: last batch accuracy {:.1}%, held-out accuracy {:.1}%, macro F1 {:.1}%",
            100.0 * train_acc,
            100.0 * m.accuracy,
            100.0 * m.macro_f1
        );
    }
    Ok(())
}
