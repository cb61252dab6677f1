//! End-to-end behavior of the training harness and run comparison.

use std::path::Path;

use axpo_core::harness::{
    compare, read_metrics, resume_seed, seed_dir, train, Algorithm, RunConfig, CONFIG_FILE, METRICS_FILE,
    TRAJECTORY_FILE,
};
use axpo_core::trajectory::{read_log, RecordKind};
use axpo_core::Error;

fn tiny(root: &Path, name: &str) -> RunConfig {
    RunConfig {
        output_dir: root.to_path_buf(),
        run_name: Some(name.into()),
        env: "tiny".into(),
        questions_per_step: 4,
        steps: 12,
        seeds: vec![1, 2],
        eval_every: 4,
        checkpoint_every: 5,
        ..RunConfig::default()
    }
}

#[test]
fn zero_steps_writes_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "empty");
    cfg.steps = 0;
    let summary = train(&cfg, false).unwrap();
    let run = &summary.seeds[0];
    assert_eq!(run.metrics.len(), 1);
    assert!(run.metrics[0].pass1_eval.is_some());
    assert!(run.metrics[0].tool_use_rate.is_none());
    let records = read_log(run.dir.join(TRAJECTORY_FILE)).unwrap();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.kind == RecordKind::Eval && r.step == 0));
}

#[test]
fn metrics_file_matches_returned_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "metrics");
    let summary = train(&cfg, false).unwrap();
    for run in &summary.seeds {
        // The histogram lives in its own file.
        let mut expected = run.metrics.clone();
        expected.iter_mut().for_each(|m| m.histogram.clear());
        assert_eq!(read_metrics(run.dir.join(METRICS_FILE)).unwrap(), expected);
        // Evaluations at 0, 4, 8 and the final step.
        let evals: Vec<u32> = run.metrics.iter().filter(|m| m.pass1_eval.is_some()).map(|m| m.step).collect();
        assert_eq!(evals, vec![0, 4, 8, 12]);
    }
    let stored = RunConfig::load(cfg.run_dir().join(CONFIG_FILE)).unwrap();
    assert_eq!(stored, cfg);
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "same");
    train(&cfg, false).unwrap();
    let report = compare(cfg.run_dir(), cfg.run_dir()).unwrap();
    assert_eq!(report.seeds, vec![1, 2]);
    for m in &report.metrics {
        assert!(m.deltas.iter().flatten().all(|&d| d == 0.0), "{}", m.name);
    }
    assert!(report.table().contains("final_tool_use_rate"));
}

#[test]
fn compare_refuses_mismatched_and_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(dir.path(), "a");
    let mut b = tiny(dir.path(), "b");
    b.steps = 8;
    train(&a, false).unwrap();
    train(&b, false).unwrap();
    assert!(matches!(compare(a.run_dir(), b.run_dir()), Err(Error::ConfigMismatch(_))));
    assert!(matches!(compare(a.run_dir(), dir.path().join("nope")), Err(Error::MissingRun(_))));

    let mut c = tiny(dir.path(), "c");
    c.seeds = vec![7];
    train(&c, false).unwrap();
    assert!(matches!(compare(a.run_dir(), c.run_dir()), Err(Error::ConfigMismatch(_))));

    std::fs::remove_file(seed_dir(&a.run_dir(), 2).join(METRICS_FILE)).unwrap();
    let mut a2 = a.clone();
    a2.run_name = Some("a2".into());
    train(&a2, false).unwrap();
    assert!(matches!(compare(a.run_dir(), a2.run_dir()), Err(Error::MissingRun(_))));
}

#[test]
fn resume_checks_the_stored_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "resume");
    assert!(matches!(resume_seed(&cfg, 1), Err(Error::MissingRun(_))));
    train(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.lr = 0.5;
    assert!(matches!(resume_seed(&other, 1), Err(Error::ConfigMismatch(_))));
    // Resuming a finished run reproduces it.
    let before = std::fs::read(seed_dir(&cfg.run_dir(), 1).join(TRAJECTORY_FILE)).unwrap();
    resume_seed(&cfg, 1).unwrap();
    let after = std::fs::read(seed_dir(&cfg.run_dir(), 1).join(TRAJECTORY_FILE)).unwrap();
    assert_eq!(before, after);
}

#[test]
fn grpo_runs_never_resample() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "grpo");
    cfg.algorithm = Algorithm::Grpo;
    let summary = train(&cfg, false).unwrap();
    for run in &summary.seeds {
        assert!(run.metrics.iter().all(|m| m.extra_continuations == 0));
        let records = read_log(run.dir.join(TRAJECTORY_FILE)).unwrap();
        assert!(records.iter().all(|r| r.kind != RecordKind::Resample));
    }
}
