//! Training loop.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, step, ...)`,
//! so a run is reproducible from its config alone and a resumed run only needs
//! the checkpointed policy and step index.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{seed_dir, RunConfig, AUDIT_FILE, CHECKPOINT_FILE, CONFIG_FILE, HISTOGRAM_FILE, METRICS_FILE, TRAJECTORY_FILE};
use crate::advantage::{apply_update, policy_gradient};
use crate::axpo::{
    allocate_budget, assemble_step_losses, budget_cap, detect_trigger, rank_candidates, resample, AuditEntry,
    ResampleResult,
};
use crate::diagnostics::{metrics_from_records, write_histograms, write_metrics, StepMetrics};
use crate::error::{Error, Result};
use crate::policy_env::{sample_rollout, EnvSpec, TabularPolicy};
use crate::rng::{self, Purpose};
use crate::trajectory::{read_log, Group, LogWriter, RecordKind, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    /// Training steps completed; the next step to run.
    pub next_step: u32,
    pub policy: TabularPolicy,
}

/// Simulated interruption: stop before step `0` begins, leaving logs as a crash would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopAt(pub u32);

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    /// Empty when the run was interrupted.
    pub metrics: Vec<StepMetrics>,
    pub policy: TabularPolicy,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedRun>,
}

/// Trains every seed of `cfg`. With `resume`, each seed continues from its
/// checkpoint, if any.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    if !resume {
        write_config(cfg)?;
    }
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| if resume { resume_seed(cfg, seed) } else { train_seed(cfg, seed, None) })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunSummary { run_dir, seeds })
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

/// Trains one seed from scratch, overwriting its directory.
pub fn train_seed(cfg: &RunConfig, seed: u64, stop: Option<StopAt>) -> Result<SeedRun> {
    cfg.validate()?;
    let dir = seed_dir(&cfg.run_dir(), seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if !cfg.run_dir().join(CONFIG_FILE).exists() {
        write_config(cfg)?;
    }
    for f in [TRAJECTORY_FILE, AUDIT_FILE] {
        let p = dir.join(f);
        File::create(&p).map_err(|e| Error::io(&p, e))?;
    }
    for f in [CHECKPOINT_FILE, METRICS_FILE, HISTOGRAM_FILE] {
        let _ = std::fs::remove_file(dir.join(f));
    }
    let params = cfg.env_params()?;
    let env = params.build()?;
    let policy = params.initial_policy(&env)?;
    run_loop(cfg, seed, &dir, &env, policy, 0, stop)
}

/// Continues one seed from its last checkpoint, discarding log lines written
/// after it.
pub fn resume_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let stored_path = run_dir.join(CONFIG_FILE);
    if !stored_path.exists() {
        return Err(Error::MissingRun(run_dir));
    }
    let stored = RunConfig::load(&stored_path)?;
    if &stored != cfg {
        return Err(Error::ConfigMismatch(format!(
            "{} differs from the requested configuration",
            stored_path.display()
        )));
    }
    let dir = seed_dir(&run_dir, seed);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return train_seed(cfg, seed, None);
    }
    let text = std::fs::read_to_string(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::parse(1, "<checkpoint>", e.to_string()))?;
    if ckpt.seed != seed {
        return Err(Error::ConfigMismatch(format!("checkpoint belongs to seed {}", ckpt.seed)));
    }
    truncate_log(&dir.join(TRAJECTORY_FILE), "step_index_in_training", ckpt.next_step)?;
    truncate_log(&dir.join(AUDIT_FILE), "step", ckpt.next_step)?;
    let env = cfg.env_params()?.build()?;
    run_loop(cfg, seed, &dir, &env, ckpt.policy, ckpt.next_step, None)
}

/// Cuts a line-delimited log at the first line whose `field` is at least
/// `step`, or at the first unreadable line.
fn truncate_log(path: &Path, field: &str, step: u32) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut keep = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let value: Option<u64> = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get(field).and_then(serde_json::Value::as_u64));
        match value {
            Some(s) if s < u64::from(step) => keep += n as u64,
            _ => break,
        }
    }
    let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    file.set_len(keep).map_err(|e| Error::io(path, e))
}

fn write_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string(ckpt).expect("checkpoint serializes");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn record(run_id: &str, step: u32, kind: RecordKind, index: usize, source: Option<String>, t: &crate::trajectory::Trajectory) -> TrajectoryRecord {
    TrajectoryRecord {
        run_id: run_id.to_string(),
        step,
        kind,
        rollout_index: index as u32,
        is_resample: kind == RecordKind::Resample,
        source_prefix_id: source,
        trajectory: t.clone(),
    }
}

fn evaluate(cfg: &RunConfig, env: &EnvSpec, policy: &TabularPolicy, seed: u64, step: u32) -> Vec<Vec<crate::trajectory::Trajectory>> {
    (0..env.num_questions as u32)
        .into_par_iter()
        .map(|q| {
            (0..cfg.eval_rollouts)
                .map(|i| {
                    let mut rng = rng::stream(seed, Purpose::Eval, &[u64::from(step), u64::from(q), i as u64]);
                    sample_rollout(policy, env, q, &mut rng)
                })
                .collect()
        })
        .collect()
}

/// Samples, resamples and scores the groups for one step.
pub(crate) fn rollout_step(
    cfg: &RunConfig,
    env: &EnvSpec,
    policy: &TabularPolicy,
    seed: u64,
    step: u32,
) -> Result<(Vec<Group>, Vec<ResampleResult>)> {
    let n = cfg.group_size;
    let b = cfg.questions_per_step;
    let questions = index::sample(
        &mut rng::stream(seed, Purpose::QuestionSelect, &[u64::from(step)]),
        env.num_questions,
        b,
    )
    .into_vec();
    let groups = questions
        .par_iter()
        .enumerate()
        .map(|(slot, &q)| {
            let rollouts = (0..n)
                .map(|i| {
                    let mut rng = rng::stream(seed, Purpose::Rollout, &[u64::from(step), slot as u64, i as u64]);
                    sample_rollout(policy, env, q as u32, &mut rng)
                })
                .collect();
            Group::new(q as u32, rollouts)
        })
        .collect::<Result<Vec<_>>>()?;
    let cap = budget_cap(cfg.effective_ratio(), b, n);
    if cap < cfg.resample_k {
        return Ok((groups, Vec::new()));
    }
    let ranked = groups
        .iter()
        .enumerate()
        .filter_map(|(slot, g)| detect_trigger(slot, g).map(|t| rank_candidates(g, &t)))
        .collect::<Result<Vec<_>>>()?;
    let plan = allocate_budget(&ranked, cfg.resample_k, cap);
    let results = resample(&plan, &groups, policy, env, seed, u64::from(step))?;
    Ok((groups, results))
}

fn run_loop(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    env: &EnvSpec,
    mut policy: TabularPolicy,
    start: u32,
    stop: Option<StopAt>,
) -> Result<SeedRun> {
    let params = cfg.env_params()?;
    let reference = params.initial_policy(env)?;
    let obj = cfg.objective();
    let run_id = format!("seed-{seed}");
    let traj_path = dir.join(TRAJECTORY_FILE);
    let audit_path = dir.join(AUDIT_FILE);
    let mut log = LogWriter::append(&traj_path)?;
    let audit_file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&audit_path)
        .map_err(|e| Error::io(&audit_path, e))?;
    let mut audit = BufWriter::new(audit_file);

    for step in start..=cfg.steps {
        if stop == Some(StopAt(step)) {
            log.flush()?;
            audit.flush().map_err(|e| Error::io(&audit_path, e))?;
            return Ok(SeedRun {
                seed,
                dir: dir.to_path_buf(),
                metrics: Vec::new(),
                policy,
            });
        }
        if step % cfg.eval_every == 0 {
            for (q, rollouts) in evaluate(cfg, env, &policy, seed, step).iter().enumerate() {
                debug_assert!(rollouts.iter().all(|t| t.question_id == q as u32));
                for (i, t) in rollouts.iter().enumerate() {
                    log.write(&record(&run_id, step, RecordKind::Eval, i, None, t))?;
                }
            }
        }
        if step == cfg.steps {
            break;
        }

        let (groups, results) = rollout_step(cfg, env, &policy, seed, step)?;
        let batch = assemble_step_losses(&groups, &results)?;
        for _ in 0..obj.epochs_per_batch {
            let grad = policy_gradient(&batch.items, &policy, &reference, &obj)?;
            apply_update(&mut policy, &grad, obj.learning_rate);
        }

        for g in &groups {
            for (i, t) in g.rollouts.iter().enumerate() {
                log.write(&record(&run_id, step, RecordKind::Rollout, i, None, t))?;
            }
        }
        for r in &results {
            let src = TrajectoryRecord::prefix_id(r.candidate.question_id, r.candidate.source_index);
            for (k, t) in r.continuations.iter().enumerate() {
                log.write(&record(&run_id, step, RecordKind::Resample, k, Some(src.clone()), t))?;
            }
            let line = serde_json::to_string(&AuditEntry::from_result(step, r)).expect("audit serializes");
            writeln!(audit, "{line}").map_err(|e| Error::io(&audit_path, e))?;
        }

        let next = step + 1;
        if next % cfg.checkpoint_every == 0 || next == cfg.steps {
            log.flush()?;
            audit.flush().map_err(|e| Error::io(&audit_path, e))?;
            write_checkpoint(
                dir,
                &Checkpoint {
                    seed,
                    next_step: next,
                    policy: policy.clone(),
                },
            )?;
        }
    }
    log.flush()?;
    audit.flush().map_err(|e| Error::io(&audit_path, e))?;
    drop(log);

    let metrics = metrics_from_records(&read_log(&traj_path)?)?;
    write_metrics(dir.join(METRICS_FILE), &metrics)?;
    write_histograms(dir.join(HISTOGRAM_FILE), &metrics)?;
    Ok(SeedRun {
        seed,
        dir: dir.to_path_buf(),
        metrics,
        policy,
    })
}
