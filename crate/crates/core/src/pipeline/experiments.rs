//! Multi-model experiments: the cross-subject comparison of MViTime,
//! MViTime+ and MViTime++ per held-out subject, and the pre-training ablation.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::eval::{evaluate, loso_split, metrics, render_table, subject_folds, ConfusionMatrix, ResultRow};
use crate::ingest::Dataset;
use crate::model::{CombineMode, Mvitime};
use crate::rng::derive_seed;
use crate::train::{
    combine_backbones, finetune, finetune_network, fresh_model, pretrain_cross_subject, pretrain_self,
    Network, RunOptions, TrainConfig, Trained,
};

use super::{audit, finished, write_atomic, PipelineError, Run};

/// Row order of the cross-subject table.
pub const CROSS_SUBJECT_METHODS: [&str; 3] = ["MViTime", "MViTime+", "MViTime++"];

/// Row order of the ablation table.
pub const ABLATION_ROWS: [&str; 3] = ["Baseline", "Baseline + CL", "Baseline + CL-Large"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: String,
    /// One row per method in [`CROSS_SUBJECT_METHODS`] order.
    pub rows: Vec<ResultRow>,
    /// Subjects recorded in the checkpoint of every training stage.
    pub provenance: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSubjectReport {
    pub seed: u64,
    pub config_digest: String,
    pub alpha: f64,
    pub subjects: Vec<SubjectResult>,
}

impl CrossSubjectReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.subjects {
            out.push_str(&render_table(&format!("held-out subject {} (%)", s.subject), &s.rows));
            out.push('\n');
        }
        out
    }
}

fn options(run: &Run, upstream: &BTreeSet<String>) -> RunOptions {
    RunOptions {
        config_digest: run.digest.clone(),
        upstream_subjects: upstream.clone(),
        ..Default::default()
    }
}

/// Record a finished stage in `provenance` after checking it saw no
/// held-out subject.
fn record<N: Network>(
    t: &Trained<N>,
    upstream: &BTreeSet<String>,
    held: &BTreeSet<String>,
    provenance: &mut BTreeMap<String, BTreeSet<String>>,
) -> Result<BTreeSet<String>, PipelineError> {
    let seen = finished(&t.network, &t.report, upstream).meta.subjects_seen;
    audit(&t.report.stage, &seen, held)?;
    provenance.insert(t.report.stage.clone(), seen.clone());
    Ok(seen)
}

fn one_subject(run: &Run, data: &Dataset, subject: &str, cfg: &TrainConfig) -> Result<SubjectResult, PipelineError> {
    let (train, test) = loso_split(data, subject)?;
    let held = BTreeSet::from([subject.to_string()]);
    let len = train.epoch_len;
    if let Some(d) = run.config.contrastive.pca_dim.filter(|&d| d != len) {
        return Err(PipelineError::Config(format!(
            "combining backbones needs contrastive.pca_dim equal to the epoch length {len}, got {d}"
        )));
    }
    let model = run.config.model.build(len);
    let aug = &run.config.augment;
    let none = BTreeSet::new();
    let mut provenance = BTreeMap::new();

    let s = pretrain_self(&train, model.clone(), cfg, aug, &options(run, &none))?;
    let s_seen = record(&s, &none, &held, &mut provenance)?;
    let x = pretrain_cross_subject(&train, model, cfg, aug, len, &options(run, &none))?;
    let x_seen = record(&x, &none, &held, &mut provenance)?;
    let both: BTreeSet<String> = s_seen.union(&x_seen).cloned().collect();

    let mut rows = Vec::with_capacity(3);
    let base = finetune(s.network.clone(), &train, cfg, &options(run, &s_seen))?;
    record(&base, &s_seen, &held, &mut provenance)?;
    rows.push(ResultRow::new(CROSS_SUBJECT_METHODS[0], &evaluate(&base.network, &test)?.1));

    for (method, mode) in CROSS_SUBJECT_METHODS[1..].iter().zip([CombineMode::Features, CombineMode::Full]) {
        let joined = combine_backbones(
            s.network.clone(),
            x.network.clone(),
            cfg.combine_alpha,
            mode,
            derive_seed(cfg.seed, "combine", 0),
        )?;
        let stage = format!("finetune-{}", method.to_lowercase().replace('+', "p"));
        let t = finetune_network(joined, &train, cfg, &stage, &options(run, &both))?;
        record(&t, &both, &held, &mut provenance)?;
        rows.push(ResultRow::new(*method, &evaluate(&t.network, &test)?.1));
    }
    Ok(SubjectResult {
        subject: subject.to_string(),
        rows,
        provenance,
    })
}

/// For every held-out subject (all subjects when `eval.held_out` is empty),
/// pre-train both backbones on the remaining subjects, fine-tune MViTime,
/// MViTime+ and MViTime++ and report per-stage F1 on the held-out night.
pub fn loso_cross_subject(run: &Run, data: &Dataset) -> Result<CrossSubjectReport, PipelineError> {
    let subjects: Vec<String> = if run.config.eval.held_out.is_empty() {
        data.subjects()
    } else {
        run.config.eval.held_out.clone()
    };
    let cfg = run.config.train_config();
    let results = subjects
        .iter()
        .map(|s| one_subject(run, data, s, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CrossSubjectReport {
        seed: run.seed(),
        config_digest: run.digest.clone(),
        alpha: cfg.combine_alpha,
        subjects: results,
    })
}

/// [`loso_cross_subject`] on the configured data, writing `loso.json` and
/// `loso.txt`.
pub fn run_loso_cross_subject(run: &Run) -> Result<CrossSubjectReport, PipelineError> {
    let (data, _) = run.load_data()?;
    let report = loso_cross_subject(run, &data)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&run.path("loso.json"), json.as_bytes())?;
    let text = format!("{}{}", run.stamp("#"), report.render());
    write_atomic(&run.path("loso.txt"), text.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub result: ResultRow,
    /// Stages whose weights the fine-tuning started from; empty for the
    /// baseline.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pretrain_checkpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub pretrain_subjects: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub config_digest: String,
    pub eval_subjects: Vec<String>,
    pub folds: usize,
    /// One row per configuration in [`ABLATION_ROWS`] order.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let rows: Vec<ResultRow> = self.rows.iter().map(|r| r.result.clone()).collect();
        render_table(
            &format!("pre-training ablation, {} subject-wise folds (%)", self.folds),
            &rows,
        )
    }
}

/// Compare fine-tuning from scratch, after self-contrast pre-training on the
/// training folds, and after pre-training on disjoint extra subjects.
/// Confusion matrices are pooled over subject-wise folds.
pub fn ablation(run: &Run, data: &Dataset) -> Result<AblationReport, PipelineError> {
    let sec = &run.config.ablation;
    let extra: BTreeSet<String> = sec.extra_subjects.iter().cloned().collect();
    let eval_subjects: Vec<String> = if sec.eval_subjects.is_empty() {
        data.subjects().into_iter().filter(|s| !extra.contains(s)).collect()
    } else {
        sec.eval_subjects.clone()
    };
    let overlap: Vec<String> = eval_subjects.iter().filter(|s| extra.contains(*s)).cloned().collect();
    if !overlap.is_empty() {
        return Err(PipelineError::SubjectOverlap { subjects: overlap });
    }
    if extra.is_empty() {
        return Err(PipelineError::Config("ablation.extra_subjects is empty".into()));
    }
    let present: BTreeSet<String> = data.subjects().into_iter().collect();
    if let Some(s) = eval_subjects.iter().chain(&extra).find(|s| !present.contains(*s)) {
        return Err(crate::eval::EvalError::UnknownSubject(s.clone()).into());
    }
    let k = run.config.eval.folds.min(eval_subjects.len());
    let folds = subject_folds(&eval_subjects, k)?;
    let cfg = run.config.train_config();
    let model = run.config.model.build(data.epoch_len);
    let aug = &run.config.augment;
    let none = BTreeSet::new();
    let universe: BTreeSet<String> = eval_subjects.iter().cloned().collect();

    let large_data = data.select(&extra, true);
    let large = pretrain_self(&large_data, model.clone(), &cfg, aug, &options(run, &none))?;
    let large_seen = finished(&large.network, &large.report, &none).meta.subjects_seen;
    audit("pretrain (CL-Large)", &large_seen, &universe)?;
    let c = finished(&large.network, &large.report, &none);
    run.save_checkpoint("ablation-cl-large.ckpt", &c)?;

    let mut pooled = [ConfusionMatrix::default(); 3];
    let mut cl_refs = Vec::new();
    let mut cl_subjects = BTreeSet::new();
    for (i, test_set) in folds.iter().enumerate() {
        let train = data.select(&universe.difference(test_set).cloned().collect(), true);
        let test = data.select(test_set, true);
        let starts: [(Mvitime<f32>, BTreeSet<String>); 3] = [
            (fresh_model(model.clone(), &train, cfg.seed)?, none.clone()),
            {
                let p = pretrain_self(&train, model.clone(), &cfg, aug, &options(run, &none))?;
                let seen = finished(&p.network, &p.report, &none).meta.subjects_seen;
                audit("pretrain (CL)", &seen, test_set)?;
                let name = format!("ablation-cl-fold{i}.ckpt");
                run.save_checkpoint(&name, &finished(&p.network, &p.report, &none))?;
                cl_refs.push(name);
                cl_subjects.extend(seen.iter().cloned());
                (p.network, seen)
            },
            (large.network.clone(), large_seen.clone()),
        ];
        for (j, (start, upstream)) in starts.into_iter().enumerate() {
            let t = finetune(start, &train, &cfg, &options(run, &upstream))?;
            let seen = finished(&t.network, &t.report, &upstream).meta.subjects_seen;
            audit(ABLATION_ROWS[j], &seen, test_set)?;
            pooled[j].merge(&evaluate(&t.network, &test)?.0);
        }
    }
    let refs = [Vec::new(), cl_refs, vec!["ablation-cl-large.ckpt".to_string()]];
    let subjects = [BTreeSet::new(), cl_subjects, large_seen];
    let rows = pooled
        .iter()
        .zip(refs)
        .zip(subjects)
        .enumerate()
        .map(|(j, ((cm, pretrain_checkpoints), pretrain_subjects))| {
            Ok(AblationRow {
                result: ResultRow::new(ABLATION_ROWS[j], &metrics(cm)?),
                pretrain_checkpoints,
                pretrain_subjects,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(AblationReport {
        seed: run.seed(),
        config_digest: run.digest.clone(),
        eval_subjects,
        folds: k,
        rows,
    })
}

/// [`ablation`] on the configured data, writing `ablation.json` and
/// `ablation.txt`.
pub fn run_ablation(run: &Run) -> Result<AblationReport, PipelineError> {
    let (data, _) = run.load_data()?;
    let report = ablation(run, &data)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&run.path("ablation.json"), json.as_bytes())?;
    let text = format!("{}{}", run.stamp("#"), report.render());
    write_atomic(&run.path("ablation.txt"), text.as_bytes())?;
    Ok(report)
}
