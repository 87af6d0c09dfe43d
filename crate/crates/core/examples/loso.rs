//! Leave-one-subject-out comparison of MViTime, MViTime+ and MViTime++.
//!
//! cargo run --release --example loso -- [DIR]
//!
//! DIR is a Sleep-EDF style directory; a synthetic one is used otherwise.
//! Results and checkpoints go to a temporary run directory.

use mvitime::ingest::Subset;
use mvitime::pipeline::{run_loso_cross_subject, Preset, Run, RunConfig};
use mvitime::synthetic::{write_edf_dir, SyntheticSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scratch = tempfile::tempdir()?;
    let mut c = RunConfig::default();
    c.run.out_dir = scratch.path().join("runs");
    c.run.data_dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let dir = scratch.path().join("edf");
            let spec = SyntheticSpec {
                subjects: 4,
                epochs_per_subject: 30,
                epoch_len: 120,
                seed: 2,
                ..Default::default()
            };
            write_edf_dir(&dir, &spec, "EEG Fpz-Cz")?;
            c.run.subset = Subset::All;
            c.model.preset = Preset::Tiny;
            c.train.pretrain.batch_size = 16;
            c.train.pretrain.total_steps = 40;
            c.train.finetune.batch_size = 32;
            c.train.finetune.total_steps = 60;
            dir
        }
    };
    let run = Run::new(c)?;
    let report = run_loso_cross_subject(&run)?;
    print!("{}", report.render());
    for s in &report.subjects {
        let stages: Vec<&str> = s.provenance.keys().map(String::as_str).collect();
        println!("{}: trained {} without it", s.subject, stages.join(", "));
    }
    Ok(())
}
