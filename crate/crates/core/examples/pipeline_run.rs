//! Every stage of a run in order, the way the command-line tool chains them:
//! ingest, both pre-trainings, fine-tuning, combination, evaluation, report.
//!
//! cargo run --release --example pipeline_run -- [config.toml]

use mvitime::ingest::Subset;
use mvitime::model::CombineMode;
use mvitime::pipeline::{self, Preset, Run, RunConfig};
use mvitime::synthetic::{write_edf_dir, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scratch = tempfile::tempdir()?;
    let config = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let data = scratch.path().join("edf");
            let spec = SyntheticSpec {
                subjects: 4,
                epochs_per_subject: 30,
                epoch_len: 120,
                seed: 8,
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
            c.train.finetune.total_steps = 60;
            c.eval.held_out = vec!["SC403".into()];
            c
        }
    };
    let run = Run::new(config)?;
    let (data, manifest) = pipeline::ingest(&run)?;
    println!("{} epochs from {} subjects", manifest.total_epochs, manifest.subjects.len());
    pipeline::pretrain(&run, &data)?;
    pipeline::pretrain_isc(&run, &data)?;
    pipeline::finetune(&run, &data, Some(&run.path("pretrain.ckpt")))?;
    pipeline::combine(&run, &data, CombineMode::Full, run.config.train.combine_alpha)?;
    for name in ["finetune.ckpt", "combine-full.ckpt"] {
        let e = pipeline::evaluate(&run, &data, &run.path(name))?;
        println!("{name}: accuracy {:.1}%, macro F1 {:.1}%", 100.0 * e.metrics.accuracy, 100.0 * e.metrics.macro_f1);
    }
    println!();
    print!("{}", pipeline::report(&run)?);
    Ok(())
}
