use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvitime::ingest::Subset;
use mvitime::pipeline::{
    self, Preset, Run, RunConfig, ABLATION_ROWS, CROSS_SUBJECT_METHODS, DATA_DIR_ENV, OUT_DIR_ENV,
};
use mvitime::synthetic::{write_edf_dir, SyntheticSpec};

/// Sleep-EDF style directory of `subjects` synthetic recordings and a run
/// configuration small enough for a test.
fn toy(dir: &Path, subjects: usize) -> RunConfig {
    let data = dir.join("edf");
    write_edf_dir(
        &data,
        &SyntheticSpec {
            subjects,
            epochs_per_subject: 20,
            epoch_len: 120,
            seed: 11,
            ..Default::default()
        },
        "EEG Fpz-Cz",
    )
    .unwrap();
    let mut c = RunConfig::default();
    c.run.data_dir = data;
    c.run.out_dir = dir.join("runs");
    c.run.subset = Subset::All;
    c.model.preset = Preset::Tiny;
    c.train.pretrain.batch_size = 16;
    c.train.pretrain.total_steps = 4;
    c.train.finetune.batch_size = 16;
    c.train.finetune.total_steps = 4;
    c
}

#[test]
fn ablation_reports_three_rows_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy(dir.path(), 5);
    c.ablation.extra_subjects = vec!["SC404".into()];
    c.eval.folds = 2;
    let run = Run::new(c).unwrap();
    let report = pipeline::run_ablation(&run).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.result.label.as_str()).collect();
    assert_eq!(labels, ABLATION_ROWS);
    assert_eq!(report.folds, 2);
    assert_eq!(report.eval_subjects, ["SC400", "SC401", "SC402", "SC403"]);
    // CL-Large saw only the extra subject, CL only evaluation subjects
    assert_eq!(report.rows[2].pretrain_subjects.iter().collect::<Vec<_>>(), ["SC404"]);
    assert!(!report.rows[1].pretrain_subjects.contains("SC404"));
    assert_eq!(report.rows[1].pretrain_checkpoints.len(), 2);

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.path("ablation.json")).unwrap()).unwrap();
    let baseline = &json["rows"][0];
    assert!(baseline.get("pretrain_checkpoints").is_none() && baseline.get("pretrain_subjects").is_none());
    assert!(json["rows"][2].get("pretrain_checkpoints").is_some());
    let text = std::fs::read_to_string(run.path("ablation.txt")).unwrap();
    assert!(text.starts_with(&run.stamp("#")));
    assert!(run.path("ablation-cl-large.ckpt").exists());
}

#[test]
fn ablation_refuses_overlapping_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy(dir.path(), 3);
    c.ablation.extra_subjects = vec!["SC402".into()];
    c.ablation.eval_subjects = vec!["SC400".into(), "SC402".into()];
    let run = Run::new(c).unwrap();
    let err = pipeline::run_ablation(&run).unwrap_err();
    match &err {
        pipeline::PipelineError::SubjectOverlap { subjects } => assert_eq!(subjects, &["SC402"]),
        other => panic!("expected SubjectOverlap, got {other}"),
    }
    assert_eq!(err.exit_code(), 7);
}

#[test]
fn loso_grid_is_complete_ordered_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = toy(a.path(), 3);
    let mut elsewhere = c.clone();
    elsewhere.run.out_dir = b.path().to_path_buf();
    let run_a = Run::new(c).unwrap();
    let run_b = Run::new(elsewhere).unwrap();
    assert_eq!(run_a.digest, run_b.digest);
    let report = pipeline::run_loso_cross_subject(&run_a).unwrap();
    pipeline::run_loso_cross_subject(&run_b).unwrap();

    let subjects: Vec<&str> = report.subjects.iter().map(|s| s.subject.as_str()).collect();
    assert_eq!(subjects, ["SC400", "SC401", "SC402"]);
    for s in &report.subjects {
        let methods: Vec<&str> = s.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(methods, CROSS_SUBJECT_METHODS);
        for r in &s.rows {
            assert_eq!(r.per_class_f1.len(), 5);
            assert!(r.per_class_f1.iter().chain([&r.accuracy, &r.macro_f1]).all(|v| (0.0..=1.0).contains(v)));
        }
    }
    for name in ["loso.json", "loso.txt"] {
        let x = std::fs::read(run_a.path(name)).unwrap();
        let y = std::fs::read(run_b.path(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn evaluation_needs_held_out_subjects_and_audits_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(toy(dir.path(), 3)).unwrap();
    let (data, _) = pipeline::ingest(&run).unwrap();
    pipeline::finetune(&run, &data, None).unwrap();
    let ckpt = run.path("finetune.ckpt");
    let err = pipeline::evaluate(&run, &data, &ckpt).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // the checkpoint was trained on every subject, so any test subject leaked
    let mut c = run.config.clone();
    c.eval.held_out = vec!["SC401".into()];
    let leaky = Run::new(c).unwrap();
    let err = pipeline::evaluate(&leaky, &data, &ckpt).unwrap_err();
    assert!(matches!(err, pipeline::PipelineError::Leakage { .. }), "{err}");
}

#[test]
fn held_out_subjects_stay_out_of_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy(dir.path(), 3);
    c.eval.held_out = vec!["SC402".into()];
    let run = Run::new(c).unwrap();
    let (data, manifest) = pipeline::ingest(&run).unwrap();
    assert_eq!(manifest.subjects.len(), 3);
    pipeline::pretrain(&run, &data).unwrap();
    pipeline::pretrain_isc(&run, &data).unwrap();
    pipeline::finetune(&run, &data, Some(&run.path("pretrain.ckpt"))).unwrap();
    pipeline::combine(&run, &data, mvitime::model::CombineMode::Full, 0.5).unwrap();
    for name in ["pretrain.ckpt", "pretrain-isc.ckpt", "finetune.ckpt", "combine-full.ckpt"] {
        let (_, ckpt) = pipeline::load_network(&run.path(name)).unwrap();
        assert!(!ckpt.meta.subjects_seen.contains("SC402"), "{name}");
        assert_eq!(ckpt.meta.config_digest, run.digest);
        let e = pipeline::evaluate(&run, &data, &run.path(name)).unwrap();
        assert_eq!(e.confusion.total(), 20);
    }
    let report = pipeline::report(&run).unwrap();
    assert!(report.starts_with(&run.stamp("#")));
    assert!(run.path("report.txt").exists());
}

fn cli(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvitime"));
    cmd.args(args).env_remove(DATA_DIR_ENV).env_remove(OUT_DIR_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find_map(|l| l.strip_prefix("run directory ")).expect("run directory line");
    PathBuf::from(line)
}

#[test]
fn command_line_stages_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy(dir.path(), 3);
    c.run.seed = 1;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, c.to_toml()).unwrap();
    let config = config.to_str().unwrap();
    let other_out = dir.path().join("elsewhere");

    // flags beat the environment, which beats the file
    let out = cli(&["-c", config, "--seed", "2", "--out-dir", other_out.to_str().unwrap(), "ingest"], &[(OUT_DIR_ENV, &dir.path().join("ignored"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rd = run_dir(&out);
    assert!(rd.starts_with(&other_out));
    assert!(std::fs::read_to_string(rd.join("config.toml")).unwrap().contains("seed = 2"));
    let out = cli(&["-c", config, "ingest"], &[(OUT_DIR_ENV, &dir.path().join("from-env"))]);
    assert!(run_dir(&out).starts_with(dir.path().join("from-env")));

    let held = ["-c", config, "--held-out", "SC400"];
    for stage in [&["pretrain"][..], &["pretrain-isc"], &["finetune"], &["combine", "--mode", "features", "--alpha", "0.25"]] {
        let args: Vec<&str> = held.iter().chain(stage).copied().collect();
        let out = cli(&args, &[]);
        assert!(out.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cli(&[&held[..], &["evaluate", "--checkpoint", "finetune.ckpt"]].concat(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rd = run_dir(&out);
    assert!(rd.join("finetune.metrics.json").exists());
    let out = cli(&[&held[..], &["evaluate", "--checkpoint", "never-trained.ckpt"]].concat(), &[]);
    assert_eq!(out.status.code(), Some(8));
    let ckpt = rd.join("combine-features.ckpt");
    let out = cli(&[&held[..], &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]].concat(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(rd.join("combine-features.confusion.csv")).unwrap();
    assert!(csv.starts_with("# config_digest="));
    assert!(rd.join("combine-features.confusion.png").exists());
    let out = cli(&[&held[..], &["report"]].concat(), &[]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("combine-features"));

    // a checkpoint that saw every subject cannot be scored on SC401
    let out = cli(&["-c", config, "finetune"], &[]);
    let all = run_dir(&out).join("finetune.ckpt");
    let out = cli(&["-c", config, "--held-out", "SC401", "evaluate", "--checkpoint", all.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(7));

    std::fs::write(dir.path().join("bad.toml"), "[run]\nsed = 3\n").unwrap();
    assert_eq!(cli(&["-c", dir.path().join("bad.toml").to_str().unwrap(), "ingest"], &[]).status.code(), Some(3));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(cli(&["-c", config, "--data-dir", empty.to_str().unwrap(), "ingest"], &[]).status.code(), Some(4));
    assert_eq!(cli(&["-c", config, "--data-dir", "/nonexistent", "ingest"], &[]).status.code(), Some(3));
    assert_eq!(cli(&["-c", config, "--held-out", "SC400", "combine", "--alpha", "2"], &[]).status.code(), Some(5));
    assert_eq!(cli(&["frobnicate"], &[]).status.code(), Some(2));
}
