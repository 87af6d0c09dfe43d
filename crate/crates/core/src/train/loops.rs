//! The training stages.

use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use crate::augment::{make_views, AugmentConfig};
use crate::contrastive::{
    build_cross_subject_batch, interleaved_pairing, nt_xent_loss, pca_fit, stage_concat,
    stage_representatives, EmbeddingBatch, PcaBasis, SubjectFeature,
};
use crate::ingest::{Dataset, SleepStage};
use crate::model::{Bound, Checkpoint, CheckpointMeta, InputNorm, ModelConfig, Mvitime};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::{derive_seed, stream};

use super::{clip_global_norm, cosine_warmup_lr, sgd_step, Network, Sampler, StageConfig, TrainConfig, TrainError, TrainReport};

/// Periodic checkpointing: every `every` steps (and at the end) the full
/// training state is written to `path`.
#[derive(Debug, Clone)]
pub struct Periodic {
    pub every: usize,
    pub path: PathBuf,
}

/// Run-level options shared by every stage.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_digest: String,
    pub periodic: Option<Periodic>,
    /// Continue from a checkpoint written by [`Periodic`]; the network passed
    /// in must already hold that checkpoint's parameters.
    pub resume: Option<Checkpoint>,
    /// Subjects that influenced the incoming weights, carried into checkpoints.
    pub upstream_subjects: BTreeSet<String>,
    /// Return once this many steps of the schedule are done. Together with
    /// [`Periodic`] this splits a stage over several calls.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Trained<N> {
    pub network: N,
    pub report: TrainReport,
}

/// A freshly initialized network whose input standardization is fitted on `data`.
pub fn fresh_model(config: ModelConfig, data: &Dataset, seed: u64) -> Result<Mvitime<f32>, TrainError> {
    let mut m = Mvitime::init(config, derive_seed(seed, "init", 0))?;
    m.input_norm = InputNorm::fit(data.epochs.iter().map(|e| e.samples.as_slice()));
    Ok(m)
}

struct History {
    losses: Vec<f64>,
    lrs: Vec<f64>,
    accuracies: Vec<f64>,
}

struct StepOutput {
    loss: Var,
    value: f64,
    accuracy: Option<f64>,
}

const VELOCITY: &str = "velocity.";

fn restore(
    resume: Option<&Checkpoint>,
    stage: &str,
    shapes: &[Vec<usize>],
) -> Result<(usize, History, Vec<Tensor<f32>>), TrainError> {
    let fresh = || shapes.iter().map(|s| Tensor::zeros(s.clone())).collect::<Vec<_>>();
    let Some(c) = resume else {
        let h = History {
            losses: vec![],
            lrs: vec![],
            accuracies: vec![],
        };
        return Ok((0, h, fresh()));
    };
    if c.meta.stage != stage {
        return Err(TrainError::ConfigMismatch(format!(
            "resuming {stage} from a {} checkpoint",
            c.meta.stage
        )));
    }
    let parse = |key: &str| -> Result<Vec<f64>, TrainError> {
        c.meta.notes.get(key).map_or(Ok(vec![]), |s| {
            serde_json::from_str(s).map_err(|e| TrainError::ConfigMismatch(e.to_string()))
        })
    };
    let velocity = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = c.tensor(&format!("{VELOCITY}{i}")).cloned();
            match v {
                Some(t) if t.shape() == s.as_slice() => Ok(t),
                _ => Err(TrainError::ConfigMismatch(format!("velocity {i} missing or misshapen"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let h = History {
        losses: parse("losses")?,
        lrs: parse("learning_rates")?,
        accuracies: parse("accuracies")?,
    };
    if h.losses.len() != c.meta.step {
        return Err(TrainError::ConfigMismatch("loss history does not match step".into()));
    }
    Ok((c.meta.step, h, velocity))
}

#[allow(clippy::too_many_arguments)]
fn state_checkpoint<N: Network>(
    net: &N,
    stage: &str,
    step: usize,
    total: usize,
    seed: u64,
    opts: &RunOptions,
    subjects: &BTreeSet<String>,
    h: &History,
    velocity: &[Tensor<f32>],
) -> Checkpoint {
    let mut notes = BTreeMap::new();
    notes.insert("losses".into(), serde_json::to_string(&h.losses).unwrap());
    notes.insert("learning_rates".into(), serde_json::to_string(&h.lrs).unwrap());
    notes.insert("accuracies".into(), serde_json::to_string(&h.accuracies).unwrap());
    let meta = CheckpointMeta {
        stage: stage.into(),
        step,
        total_steps: total,
        seed,
        config_digest: opts.config_digest.clone(),
        loss_digest: CheckpointMeta::digest_losses(&h.losses),
        subjects_seen: opts.upstream_subjects.union(subjects).cloned().collect(),
        notes,
    };
    let mut c = net.checkpoint(meta);
    c.tensors.extend(
        velocity
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{VELOCITY}{i}"), v.clone())),
    );
    c
}

#[allow(clippy::too_many_arguments)]
fn optimize<N: Network>(
    net: &mut N,
    stage: &str,
    cfg: &TrainConfig,
    stage_cfg: &StageConfig,
    opts: &RunOptions,
    subjects: &BTreeSet<String>,
    mut step_fn: impl FnMut(&N, &mut Graph<f32>, &[Var], usize) -> Result<StepOutput, TrainError>,
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let schedule = stage_cfg.schedule();
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    let (start, mut h, mut velocity) = restore(opts.resume.as_ref(), stage, &shapes)?;
    let end = opts.stop_at.map_or(schedule.total_steps, |s| s.min(schedule.total_steps));
    for step in start..end {
        let lr = cosine_warmup_lr(step, &schedule)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let out = step_fn(net, &mut g, &vars, step)?;
        if !out.value.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let grads = g.backward(out.loss)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
        drop(g);
        let mut grads = grads;
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        sgd_step(&mut net.params_mut(), &mut velocity, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        h.losses.push(out.value);
        h.lrs.push(lr);
        if let Some(a) = out.accuracy {
            h.accuracies.push(a);
        }
        if let Some(p) = &opts.periodic {
            let done = step + 1;
            if done % p.every.max(1) == 0 || done == end {
                let c = state_checkpoint(net, stage, done, schedule.total_steps, cfg.seed, opts, subjects, &h, &velocity);
                c.save(&p.path)?;
            }
        }
    }
    Ok(TrainReport {
        stage: stage.into(),
        final_loss: h.losses.last().copied().unwrap_or(f64::NAN),
        losses: h.losses,
        learning_rates: h.lrs,
        accuracies: h.accuracies,
        wall_clock_s: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_digest: opts.config_digest.clone(),
        subjects: subjects.clone(),
    })
}

fn contrastive_step(
    net: &Mvitime<f32>,
    g: &mut Graph<f32>,
    vars: &[Var],
    input: Tensor<f32>,
    temperature: f64,
) -> Result<StepOutput, TrainError> {
    let b = Bound::from_vars(net.specs().iter().map(|s| s.name.clone()), vars);
    let rows = input.shape()[0];
    let x = g.constant(input);
    let f = net.features(g, &b, x)?;
    let z = net.project(g, &b, f)?;
    let d = g.shape(z)[1];
    let data: Vec<f64> = g.value(z).data().iter().map(|&v| f64::from(v)).collect();
    let batch = EmbeddingBatch::new(rows, d, data, interleaved_pairing(rows))?;
    let out = nt_xent_loss(&batch, temperature)?;
    let grad = Tensor::new([rows, d], out.grad.iter().map(|&v| v as f32).collect())?;
    let loss = g.loss(z, out.loss as f32, grad)?;
    Ok(StepOutput {
        loss,
        value: out.loss,
        accuracy: None,
    })
}

fn check_length(config: &ModelConfig, len: usize) -> Result<(), TrainError> {
    if config.input_length != len {
        return Err(TrainError::ConfigMismatch(format!(
            "model expects length {}, data has {len}",
            config.input_length
        )));
    }
    Ok(())
}

/// Self-contrast pre-training: the two views of each sampled epoch are the
/// positive pair, every other view in the batch a negative.
pub fn pretrain_self(
    data: &Dataset,
    config: ModelConfig,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    opts: &RunOptions,
) -> Result<Trained<Mvitime<f32>>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_length(&config, data.epoch_len)?;
    augment.validate(data.epoch_len)?;
    let mut net = match &opts.resume {
        Some(c) => c.model()?,
        None => fresh_model(config, data, cfg.seed)?,
    };
    let b = cfg.pretrain.batch_size.min(data.len());
    let sampler = Sampler::new(data.len(), derive_seed(cfg.seed, "pretrain", 0));
    let aug_seed = derive_seed(cfg.seed, "augment", augment.seed);
    let subjects: BTreeSet<String> = data.subjects().into_iter().collect();
    let report = optimize(&mut net, "pretrain", cfg, &cfg.pretrain, opts, &subjects, |net, g, vars, step| {
        let idx = sampler.batch(step, b);
        let pairs = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = stream(aug_seed, "view", (step * b + k) as u64);
                make_views(i, &data.epochs[i].samples, augment, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<&[f32]> = pairs
            .iter()
            .flat_map(|p| [p.view_a.as_slice(), p.view_b.as_slice()])
            .collect();
        let input = net.input(&rows)?;
        contrastive_step(net, g, vars, input, cfg.temperature)
    })?;
    Ok(Trained { network: net, report })
}

/// Mean NT-Xent loss over consecutive batches of `batch_size` epochs, in
/// dataset order, with views drawn from `seed`. The same seed gives the same
/// views, so two networks can be compared on identical inputs.
pub fn contrastive_loss(
    net: &Mvitime<f32>,
    data: &Dataset,
    batch_size: usize,
    augment: &AugmentConfig,
    temperature: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    if batch_size < 2 || data.len() < 2 {
        return Err(TrainError::InvalidConfig("contrastive loss needs batches of at least 2 epochs".into()));
    }
    check_length(net.config(), data.epoch_len)?;
    let mut total = 0.0;
    let mut batches = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size).filter(|c| c.len() >= 2) {
        let pairs = chunk
            .iter()
            .map(|&i| make_views(i, &data.epochs[i].samples, augment, &mut stream(seed, "eval-view", i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<&[f32]> = pairs
            .iter()
            .flat_map(|p| [p.view_a.as_slice(), p.view_b.as_slice()])
            .collect();
        let mut g = Graph::new();
        let b = net.bind_frozen(&mut g);
        let x = g.constant(net.input(&rows)?);
        let f = net.features(&mut g, &b, x)?;
        let z = net.project(&mut g, &b, f)?;
        let d = g.shape(z)[1];
        let data: Vec<f64> = g.value(z).data().iter().map(|&v| f64::from(v)).collect();
        let batch = EmbeddingBatch::new(rows.len(), d, data, interleaved_pairing(rows.len()))?;
        total += nt_xent_loss(&batch, temperature)?.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Stage-spanning features of every subject and the PCA basis fitted on them.
///
/// Each subject contributes the first epoch of each stage in W, S1, S2, S3,
/// REM order; the concatenations are projected to `pca_dim` coordinates.
pub fn subject_features(
    data: &Dataset,
    pca_dim: usize,
) -> Result<(Vec<SubjectFeature>, PcaBasis), TrainError> {
    let groups = data.by_subject();
    if groups.len() < 2 {
        return Err(TrainError::TooFewSubjects(groups.len()));
    }
    let mut missing = Vec::new();
    let mut concat = Vec::new();
    for (subject, epochs) in &groups {
        match stage_representatives(subject, epochs.iter().copied()) {
            Ok(reps) => {
                let by_stage: BTreeMap<SleepStage, &[f32]> =
                    reps.iter().map(|(s, e)| (*s, e.samples.as_slice())).collect();
                concat.push((subject.clone(), stage_concat(subject, &by_stage)?));
            }
            Err(_) => missing.push(subject.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(TrainError::MissingStage { subjects: missing });
    }
    let rows: Vec<Vec<f64>> = concat.iter().map(|(_, v)| v.clone()).collect();
    let basis = pca_fit(&rows, pca_dim)?;
    let feats = concat
        .into_iter()
        .map(|(subject_id, v)| {
            Ok(SubjectFeature {
                subject_id,
                vector: basis.project(&v)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok((feats, basis))
}

/// Cross-subject (inter-subject correlation) pre-training: the two views of
/// one subject's feature are positives, other subjects' views negatives.
///
/// Features are built once per run. During training the inputs are
/// standardized with statistics of the features themselves; the returned
/// network carries the standardization of the raw epochs it will see later.
pub fn pretrain_cross_subject(
    data: &Dataset,
    config: ModelConfig,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    pca_dim: usize,
    opts: &RunOptions,
) -> Result<Trained<Mvitime<f32>>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_length(&config, pca_dim)?;
    augment.validate(pca_dim)?;
    let (features, _) = subject_features(data, pca_dim)?;
    let mut net = match &opts.resume {
        Some(c) => c.model()?,
        None => Mvitime::init(config, derive_seed(cfg.seed, "init", 1))?,
    };
    let raw_norm = InputNorm::fit(data.epochs.iter().map(|e| e.samples.as_slice()));
    let feats32: Vec<Vec<f32>> = features
        .iter()
        .map(|f| f.vector.iter().map(|&v| v as f32).collect())
        .collect();
    net.input_norm = InputNorm::fit(feats32.iter().map(Vec::as_slice));
    let b = cfg.pretrain.batch_size.min(features.len());
    let sampler = Sampler::new(features.len(), derive_seed(cfg.seed, "pretrain-isc", 0));
    let aug_seed = derive_seed(cfg.seed, "augment-isc", augment.seed);
    let subjects: BTreeSet<String> = features.iter().map(|f| f.subject_id.clone()).collect();
    let report = optimize(&mut net, "pretrain-isc", cfg, &cfg.pretrain, opts, &subjects, |net, g, vars, step| {
        let picked: Vec<SubjectFeature> = sampler
            .batch(step, b)
            .into_iter()
            .map(|i| features[i].clone())
            .collect();
        let batch = build_cross_subject_batch(&picked, augment, &mut stream(aug_seed, "view", step as u64))?;
        let rows: Vec<&[f32]> = batch.views.iter().map(Vec::as_slice).collect();
        let input = net.input(&rows)?;
        contrastive_step(net, g, vars, input, cfg.temperature)
    })?;
    net.input_norm = raw_norm;
    Ok(Trained { network: net, report })
}

/// Fine-tune every parameter of a pre-trained network together with a
/// freshly initialized classifier. There is deliberately no frozen-backbone
/// (linear probe) variant.
pub fn finetune(
    mut model: Mvitime<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<Trained<Mvitime<f32>>, TrainError> {
    if opts.resume.is_none() {
        model.reset_head(derive_seed(cfg.seed, "head", 0));
    }
    finetune_network(model, data, cfg, "finetune", opts)
}

/// Cross-entropy training of all parameters of `net` on labeled epochs.
pub fn finetune_network<N: Network>(
    mut net: N,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: &str,
    opts: &RunOptions,
) -> Result<Trained<N>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if net.input_length() != data.epoch_len {
        return Err(TrainError::ConfigMismatch(format!(
            "model expects length {}, data has {}",
            net.input_length(),
            data.epoch_len
        )));
    }
    let b = cfg.finetune.batch_size.min(data.len());
    let sampler = Sampler::new(data.len(), derive_seed(cfg.seed, stage, 0));
    let subjects: BTreeSet<String> = data.subjects().into_iter().collect();
    let report = optimize(&mut net, stage, cfg, &cfg.finetune, opts, &subjects, |net, g, vars, step| {
        let idx = sampler.batch(step, b);
        let rows: Vec<&[f32]> = idx.iter().map(|&i| data.epochs[i].samples.as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.epochs[i].stage.index()).collect();
        let logits = net.logits(g, vars, &rows)?;
        let predicted = crate::eval::argmax_rows(g.value(logits).data(), 5);
        let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let loss = g.cross_entropy(logits, &labels)?;
        Ok(StepOutput {
            loss,
            value: f64::from(g.value(loss).data()[0]),
            accuracy: Some(correct as f64 / labels.len() as f64),
        })
    })?;
    Ok(Trained { network: net, report })
}
