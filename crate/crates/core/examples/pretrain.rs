//! Self-contrast pre-training on synthetic epochs, with a resumable state file.
//!
//! cargo run --release --example pretrain -- [steps] [checkpoint path]

use mvitime::augment::AugmentConfig;
use mvitime::model::{CheckpointMeta, ModelConfig};
use mvitime::synthetic::{synthetic_dataset, SyntheticSpec};
use mvitime::train::{contrastive_loss, fresh_model, pretrain_self, Network, Periodic, RunOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(100), |s| s.parse())?;
    let out = args.next().unwrap_or_else(|| "pretrain.ckpt".into());
    let data = synthetic_dataset(&SyntheticSpec {
        subjects: 4,
        epochs_per_subject: 32,
        epoch_len: 128,
        seed: 1,
        ..Default::default()
    });
    let mut cfg = TrainConfig::default();
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.base_lr = 0.05;
    cfg.pretrain.total_steps = steps;
    let aug = AugmentConfig::default();
    let model = ModelConfig::tiny(data.epoch_len);

    let before = contrastive_loss(&fresh_model(model.clone(), &data, cfg.seed)?, &data, 16, &aug, cfg.temperature, 9)?;
    let opts = RunOptions {
        periodic: Some(Periodic {
            every: 25,
            path: format!("{out}.state").into(),
        }),
        ..Default::default()
    };
    let t = pretrain_self(&data, model, &cfg, &aug, &opts)?;
    for (step, (loss, lr)) in t.report.losses.iter().zip(&t.report.learning_rates).enumerate() {
        if step % 10 == 0 || step + 1 == steps {
            println!("step {step:>4}  lr {lr:.4}  loss {loss:.4}");
        }
    }
    let after = contrastive_loss(&t.network, &data, 16, &aug, cfg.temperature, 9)?;
    println!("held-fixed views: loss {before:.4} before, {after:.4} after");

    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        step: steps,
        total_steps: steps,
        seed: cfg.seed,
        loss_digest: CheckpointMeta::digest_losses(&t.report.losses),
        subjects_seen: t.report.subjects.clone(),
        ..Default::default()
    };
    t.network.checkpoint(meta).save(out.as_ref())?;
    println!("saved {out}");
    Ok(())
}
