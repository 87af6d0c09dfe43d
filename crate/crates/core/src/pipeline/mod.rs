//! Run configuration and the experiment drivers behind the command-line tool.
//!
//! A [`Run`] owns a validated [`RunConfig`] and a run directory named by the
//! configuration digest. Commands read and write artifacts there: the
//! ingestion manifest, checkpoints, training reports, evaluation results and
//! the comparison tables. Every artifact records the digest and root seed, and
//! files appear only once fully written.

mod commands;
mod config;
mod experiments;

pub use commands::{
    combine, evaluate, finetune, ingest, load_network, pretrain, pretrain_isc, report, Evaluation,
};
pub use config::{
    AblationSection, ContrastiveSection, EvalSection, IngestSection, ModelSection, Preset, RunConfig,
    RunSection, TrainSection, DATA_DIR_ENV, OUT_DIR_ENV,
};
pub use experiments::{
    ablation, loso_cross_subject, run_ablation, run_loso_cross_subject, AblationReport, AblationRow,
    CrossSubjectReport, SubjectResult, ABLATION_ROWS, CROSS_SUBJECT_METHODS,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::eval::EvalError;
use crate::ingest::{ingest_dir, Dataset, IngestError, Manifest};
use crate::model::{Checkpoint, CheckpointMeta, ModelError};
use crate::train::{Network, Periodic, RunOptions, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("pre-training subjects overlap the evaluation subjects: {}", subjects.join(", "))]
    SubjectOverlap { subjects: Vec<String> },
    #[error("held-out subjects {} reached training stage {stage}", subjects.join(", "))]
    Leakage { stage: String, subjects: Vec<String> },
    #[error("missing artifact {0}; run the command that produces it first")]
    MissingArtifact(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status for this error family. 2 is left to argument
    /// parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 3,
            PipelineError::Ingest(_) => 4,
            PipelineError::Train(_) | PipelineError::Model(_) => 5,
            PipelineError::Eval(_) => 6,
            PipelineError::SubjectOverlap { .. } | PipelineError::Leakage { .. } => 7,
            PipelineError::MissingArtifact(_) | PipelineError::Io { .. } => 8,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `bytes` to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_error(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_error(path))
}

/// A configured run and its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub digest: String,
    pub dir: PathBuf,
}

impl Run {
    /// Validate `config`, create `<out_dir>/run-<digest prefix>` and store the
    /// effective configuration there.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let digest = config.digest();
        let dir = config.run.out_dir.join(format!("run-{}", &digest[..16]));
        std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
        let run = Self { config, digest, dir };
        let text = format!("{}{}", run.stamp("#"), run.config.to_toml());
        write_atomic(&run.path("config.toml"), text.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn seed(&self) -> u64 {
        self.config.run.seed
    }

    /// One comment line carrying the digest and seed, for text artifacts.
    pub fn stamp(&self, comment: &str) -> String {
        format!("{comment} config_digest={} seed={}\n", self.digest, self.seed())
    }

    pub fn load_data(&self) -> Result<(Dataset, Manifest), PipelineError> {
        let (data, mut manifest) = ingest_dir(&self.config.run.data_dir, &self.config.ingest_options())?;
        manifest.seed = self.seed();
        manifest.config_digest = self.digest.clone();
        Ok((data, manifest))
    }

    /// Held-out subjects named in the configuration.
    pub fn held_out(&self) -> BTreeSet<String> {
        self.config.eval.held_out.iter().cloned().collect()
    }

    /// Training and test parts of `data` according to the held-out list.
    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset), PipelineError> {
        let held = self.held_out();
        let present: BTreeSet<String> = data.subjects().into_iter().collect();
        if let Some(s) = held.iter().find(|s| !present.contains(*s)) {
            return Err(EvalError::UnknownSubject(s.clone()).into());
        }
        Ok((data.select(&held, false), data.select(&held, true)))
    }

    fn options(&self, stage: &str, upstream: BTreeSet<String>) -> RunOptions {
        let every = self.config.train.checkpoint_every;
        RunOptions {
            config_digest: self.digest.clone(),
            periodic: (every > 0).then(|| Periodic {
                every,
                path: self.path(&format!("{stage}.state.ckpt")),
            }),
            resume: None,
            upstream_subjects: upstream,
            stop_at: None,
        }
    }

    fn save_checkpoint(&self, name: &str, c: &Checkpoint) -> Result<PathBuf, PipelineError> {
        let path = self.path(name);
        c.save(&path)?;
        Ok(path)
    }

    /// `<stage>.json` and `<stage>.csv` for a finished training stage.
    fn save_report(&self, report: &TrainReport) -> Result<(), PipelineError> {
        let mut r = report.clone();
        if self.config.run.deterministic {
            r.wall_clock_s = 0.0;
        }
        write_atomic(&self.path(&format!("{}.json", r.stage)), r.to_json().as_bytes())?;
        let csv = format!("{}{}", self.stamp("#"), r.to_csv());
        write_atomic(&self.path(&format!("{}.csv", r.stage)), csv.as_bytes())
    }
}

/// Final checkpoint of a training stage: the network with metadata covering
/// every subject that influenced it.
pub fn finished<N: Network>(net: &N, report: &TrainReport, upstream: &BTreeSet<String>) -> Checkpoint {
    net.checkpoint(CheckpointMeta {
        stage: report.stage.clone(),
        step: report.losses.len(),
        total_steps: report.losses.len(),
        seed: report.seed,
        config_digest: report.config_digest.clone(),
        loss_digest: CheckpointMeta::digest_losses(&report.losses),
        subjects_seen: upstream.union(&report.subjects).cloned().collect(),
        notes: Default::default(),
    })
}

/// Fail with [`PipelineError::Leakage`] if any held-out subject is among the
/// subjects recorded for a training stage.
pub fn audit(stage: &str, seen: &BTreeSet<String>, held_out: &BTreeSet<String>) -> Result<(), PipelineError> {
    let leaked: Vec<String> = seen.intersection(held_out).cloned().collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Leakage {
            stage: stage.into(),
            subjects: leaked,
        })
    }
}
