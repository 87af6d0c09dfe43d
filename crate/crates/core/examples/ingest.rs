//! Ingest a Sleep-EDF directory and print the per-subject stage counts.
//!
//! cargo run --example ingest -- DIR [channel]
//!
//! Without arguments a synthetic three-subject directory is written first.

use mvitime::ingest::{ingest_dir, IngestOptions, SleepStage, Subset};
use mvitime::synthetic::{write_edf_dir, SyntheticSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let scratch = tempfile::tempdir()?;
    let dir = match args.next() {
        Some(d) => PathBuf::from(d),
        None => {
            write_edf_dir(scratch.path(), &SyntheticSpec { epoch_len: 120, ..Default::default() }, "EEG Fpz-Cz")?;
            scratch.path().to_path_buf()
        }
    };
    let opts = IngestOptions {
        channel: args.next().unwrap_or_else(|| "EEG Fpz-Cz".into()),
        subset: Subset::All,
        ..Default::default()
    };
    let (data, manifest) = ingest_dir(&dir, &opts)?;
    println!(
        "{} epochs of {} samples ({} Hz) from {} subjects",
        data.len(),
        data.epoch_len,
        data.sample_rate_hz,
        manifest.subjects.len()
    );
    print!("{:<8}", "subject");
    for s in SleepStage::ALL {
        print!(" {:>6}", s.short());
    }
    println!();
    for s in &manifest.subjects {
        print!("{:<8}", s.subject_id);
        for st in SleepStage::ALL {
            print!(" {:>6}", s.stages[&st]);
        }
        println!();
    }
    if !manifest.excluded.is_empty() {
        println!("excluded windows: {:?}", manifest.excluded);
    }
    Ok(())
}
