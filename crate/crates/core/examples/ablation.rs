//! Fine-tuning from scratch against fine-tuning after pre-training on the
//! training folds and after pre-training on extra, disjoint subjects.
//!
//! cargo run --release --example ablation

use mvitime::ingest::Subset;
use mvitime::pipeline::{run_ablation, Preset, Run, RunConfig};
use mvitime::synthetic::{write_edf_dir, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scratch = tempfile::tempdir()?;
    let data = scratch.path().join("edf");
    let spec = SyntheticSpec {
        subjects: 8,
        epochs_per_subject: 25,
        epoch_len: 120,
        seed: 3,
        ..Default::default()
    };
    write_edf_dir(&data, &spec, "EEG Fpz-Cz")?;

    let mut c = RunConfig::default();
    c.run.data_dir = data;
    c.run.out_dir = scratch.path().join("runs");
    c.run.subset = Subset::All;
    c.model.preset = Preset::Tiny;
    c.train.pretrain.batch_size = 16;
    c.train.pretrain.total_steps = 40;
    c.train.finetune.batch_size = 32;
    c.train.finetune.total_steps = 40;
    c.eval.folds = 4;
    c.ablation.extra_subjects = vec!["SC406".into(), "SC407".into()];
    let run = Run::new(c)?;
    let report = run_ablation(&run)?;
    print!("{}", report.render());
    for row in &report.rows {
        if !row.pretrain_subjects.is_empty() {
            let seen: Vec<&str> = row.pretrain_subjects.iter().map(String::as_str).collect();
            println!("{}: pre-trained on {} (over all folds)", row.result.label, seen.join(" "));
        }
    }
    Ok(())
}
