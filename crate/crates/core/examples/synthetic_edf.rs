//! Write a small Sleep-EDF style directory of synthetic recordings.
//!
//! cargo run --example synthetic_edf -- /tmp/toy-edf [subjects] [epochs per subject]

use mvitime::synthetic::{write_edf_dir, SyntheticSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy-edf".into()));
    let subjects = args.next().map_or(Ok(3), |s| s.parse())?;
    let epochs = args.next().map_or(Ok(40), |s| s.parse())?;
    let spec = SyntheticSpec {
        subjects,
        epochs_per_subject: epochs,
        epoch_len: 120,
        seed: 7,
        ..Default::default()
    };
    write_edf_dir(&dir, &spec, "EEG Fpz-Cz")?;
    println!("wrote {subjects} subjects x {epochs} epochs of 120 samples (4 Hz) to {}", dir.display());
    Ok(())
}
