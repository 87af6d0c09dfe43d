//! The individual pipeline steps: ingest, pre-train, fine-tune, combine,
//! evaluate and report.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::eval::{self, heatmap_png, render_metrics, render_table, ConfusionMatrix, MetricsReport, ResultRow};
use crate::ingest::{Dataset, Manifest};
use crate::model::{Architecture, Checkpoint, CombineMode};
use crate::rng::derive_seed;
use crate::train::{
    self, combine_backbones, finetune_network, fresh_model, pretrain_cross_subject, pretrain_self,
    CombinedModel, Network, TrainReport,
};

use super::{audit, finished, io_error, write_atomic, PipelineError, Run};

/// Ingest the configured data directory and write `manifest.json`.
pub fn ingest(run: &Run) -> Result<(Dataset, Manifest), PipelineError> {
    let (data, manifest) = run.load_data()?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&run.path("manifest.json"), json.as_bytes())?;
    Ok((data, manifest))
}

/// Self-contrast pre-training on the non-held-out subjects, saved as
/// `pretrain.ckpt`.
pub fn pretrain(run: &Run, data: &Dataset) -> Result<TrainReport, PipelineError> {
    let (train, _) = run.split(data)?;
    let config = run.config.model.build(train.epoch_len);
    let none = BTreeSet::new();
    let t = pretrain_self(
        &train,
        config,
        &run.config.train_config(),
        &run.config.augment,
        &run.options("pretrain", none.clone()),
    )?;
    let c = finished(&t.network, &t.report, &none);
    audit("pretrain", &c.meta.subjects_seen, &run.held_out())?;
    run.save_checkpoint("pretrain.ckpt", &c)?;
    run.save_report(&t.report)?;
    Ok(t.report)
}

/// Cross-subject pre-training on the non-held-out subjects, saved as
/// `pretrain-isc.ckpt`. The PCA basis is fitted on those subjects only.
pub fn pretrain_isc(run: &Run, data: &Dataset) -> Result<TrainReport, PipelineError> {
    let (train, _) = run.split(data)?;
    let pca_dim = run.config.contrastive.pca_dim.unwrap_or(train.epoch_len);
    let config = run.config.model.build(pca_dim);
    let none = BTreeSet::new();
    let t = pretrain_cross_subject(
        &train,
        config,
        &run.config.train_config(),
        &run.config.augment,
        pca_dim,
        &run.options("pretrain-isc", none.clone()),
    )?;
    let c = finished(&t.network, &t.report, &none);
    audit("pretrain-isc", &c.meta.subjects_seen, &run.held_out())?;
    run.save_checkpoint("pretrain-isc.ckpt", &c)?;
    run.save_report(&t.report)?;
    Ok(t.report)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

/// Fine-tune the network in `from` (or a fresh one) with a new classifier on
/// the non-held-out subjects, saved as `finetune.ckpt`.
pub fn finetune(run: &Run, data: &Dataset, from: Option<&Path>) -> Result<TrainReport, PipelineError> {
    let (train, _) = run.split(data)?;
    let cfg = run.config.train_config();
    let (model, upstream) = match from {
        Some(p) => {
            let c = load_checkpoint(p)?;
            (c.model()?, c.meta.subjects_seen)
        }
        None => (fresh_model(run.config.model.build(train.epoch_len), &train, cfg.seed)?, BTreeSet::new()),
    };
    let t = train::finetune(model, &train, &cfg, &run.options("finetune", upstream.clone()))?;
    let c = finished(&t.network, &t.report, &upstream);
    audit("finetune", &c.meta.subjects_seen, &run.held_out())?;
    run.save_checkpoint("finetune.ckpt", &c)?;
    run.save_report(&t.report)?;
    Ok(t.report)
}

fn mode_name(mode: CombineMode) -> &'static str {
    match mode {
        CombineMode::Features => "features",
        CombineMode::Full => "full",
    }
}

/// Join `pretrain.ckpt` and `pretrain-isc.ckpt` with weight `alpha` on the
/// self-contrast branch and fine-tune the result, saved as
/// `combine-<mode>.ckpt`.
pub fn combine(run: &Run, data: &Dataset, mode: CombineMode, alpha: f64) -> Result<TrainReport, PipelineError> {
    let (train, _) = run.split(data)?;
    let s = load_checkpoint(&run.path("pretrain.ckpt"))?;
    let x = load_checkpoint(&run.path("pretrain-isc.ckpt"))?;
    let upstream: BTreeSet<String> = s.meta.subjects_seen.union(&x.meta.subjects_seen).cloned().collect();
    let cfg = run.config.train_config();
    let joined = combine_backbones(s.model()?, x.model()?, alpha, mode, derive_seed(cfg.seed, "combine", 0))?;
    let stage = format!("combine-{}", mode_name(mode));
    let t = finetune_network(joined, &train, &cfg, &stage, &run.options(&stage, upstream.clone()))?;
    let c = finished(&t.network, &t.report, &upstream);
    audit(&stage, &c.meta.subjects_seen, &run.held_out())?;
    run.save_checkpoint(&format!("{stage}.ckpt"), &c)?;
    run.save_report(&t.report)?;
    Ok(t.report)
}

/// Any saved classifier, single or combined.
pub fn load_network(path: &Path) -> Result<(Box<dyn Network>, Checkpoint), PipelineError> {
    let c = load_checkpoint(path)?;
    let net: Box<dyn Network> = match c.architecture {
        Architecture::Single { .. } => Box::new(c.model()?),
        Architecture::Combined { .. } => Box::new(CombinedModel::from_checkpoint(&c)?),
    };
    Ok((net, c))
}

/// Test-set results of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub checkpoint_stage: String,
    pub test_subjects: BTreeSet<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

/// Evaluate `checkpoint` on the held-out subjects. Writes
/// `<name>.metrics.json`, `<name>.metrics.txt`, `<name>.confusion.csv` and
/// `<name>.confusion.png`, where `name` is the checkpoint file stem.
pub fn evaluate(run: &Run, data: &Dataset, checkpoint: &Path) -> Result<Evaluation, PipelineError> {
    let held = run.held_out();
    if held.is_empty() {
        return Err(PipelineError::Config("eval.held_out lists no test subjects".into()));
    }
    let (_, test) = run.split(data)?;
    let (net, c) = load_network(checkpoint)?;
    audit(&c.meta.stage, &c.meta.subjects_seen, &held)?;
    let (cm, m) = eval::evaluate(net.as_ref(), &test)?;
    let name = checkpoint
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().to_string());
    let e = Evaluation {
        name: name.clone(),
        seed: run.seed(),
        config_digest: run.digest.clone(),
        checkpoint_stage: c.meta.stage,
        test_subjects: held,
        confusion: cm,
        metrics: m,
    };
    let json = serde_json::to_string_pretty(&e).expect("evaluation serializes");
    write_atomic(&run.path(&format!("{name}.metrics.json")), json.as_bytes())?;
    let text = format!("{}{}", run.stamp("#"), render_metrics(&e.confusion, &e.metrics));
    write_atomic(&run.path(&format!("{name}.metrics.txt")), text.as_bytes())?;
    let csv = format!("{}{}", run.stamp("#"), e.confusion.to_csv());
    write_atomic(&run.path(&format!("{name}.confusion.csv")), csv.as_bytes())?;
    let png = run.path(&format!("{name}.confusion.png"));
    let tmp = run.path(&format!("{name}.confusion.partial.png"));
    heatmap_png(&e.confusion, &tmp, 48)?;
    std::fs::rename(&tmp, &png).map_err(io_error(&png))?;
    Ok(e)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

/// Summarize every artifact in the run directory into `report.txt`.
pub fn report(run: &Run) -> Result<String, PipelineError> {
    let mut out = run.stamp("#");
    if let Some(m) = read_json::<Manifest>(&run.path("manifest.json")) {
        out.push_str(&format!(
            "\ndata: {} epochs of {} samples from {} subjects ({} Hz, channel {})\n",
            m.total_epochs,
            m.epoch_len,
            m.subjects.len(),
            m.sample_rate_hz,
            m.channel
        ));
    }
    let entries = sorted_entries(&run.dir)?;
    let stages: Vec<TrainReport> = entries
        .iter()
        .filter(|p| !p.to_string_lossy().ends_with(".metrics.json"))
        .filter_map(|p| read_json(p))
        .collect();
    if !stages.is_empty() {
        out.push_str("\ntraining stages\n");
        for r in &stages {
            out.push_str(&format!(
                "  {:<18} {:>6} steps  final loss {:.4}  subjects {}\n",
                r.stage,
                r.losses.len(),
                r.final_loss,
                r.subjects.len()
            ));
        }
    }
    let rows: Vec<ResultRow> = entries
        .iter()
        .filter(|p| p.to_string_lossy().ends_with(".metrics.json"))
        .filter_map(|p| read_json::<Evaluation>(p))
        .map(|e| ResultRow::new(e.name, &e.metrics))
        .collect();
    if !rows.is_empty() {
        out.push('\n');
        out.push_str(&render_table("held-out evaluation (%)", &rows));
    }
    for name in ["loso.txt", "ablation.txt"] {
        if let Ok(text) = std::fs::read_to_string(run.path(name)) {
            out.push('\n');
            out.extend(text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")));
        }
    }
    write_atomic(&run.path("report.txt"), out.as_bytes())?;
    Ok(out)
}
