//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use axpo_core::advantage::{clipped_term, grpo_advantage, surrogate_objective, LossItem, ObjectiveConfig, Provenance};
use axpo_core::axpo::{
    allocate_budget, assemble_step_losses, budget_cap, continuation_advantages, detect_trigger, is_breadth_first,
    prefix_advantage, rank_candidates, recovery_indicator, resample, AssembledBatch, Candidate, ItemOrigin,
    ResampleResult,
};
use axpo_core::coverage::{coverage_raw, coverage_resample, dominance_check, monte_carlo_coverage};
use axpo_core::harness::{
    compare, gradcheck, resume_seed, seed_dir, train, train_seed, Algorithm, RunConfig, StopAt, AUDIT_FILE,
    CHECKPOINT_FILE, HISTOGRAM_FILE, METRICS_FILE, TRAJECTORY_FILE,
};
use axpo_core::policy_env::{sample_rollout, CoverageParams, EnvParams, EnvSpec, TabularPolicy};
use axpo_core::trajectory::Group;

type Check = Result<String, String>;
type Criterion<'a> = (u8, &'static str, Duration, Box<dyn Fn() -> Check + 'a>);

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

fn close_all(name: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{name}: length {} vs {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(want) {
        close(name, *g, *w, tol)?;
    }
    Ok(())
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

// Values below were computed independently (double precision, direct formula).
const SQRT3: f64 = 1.7320508075688772;
const INV_SQRT3: f64 = 0.5773502691896258;

fn criterion_1() -> Check {
    let tol = 1e-9;
    let cfg = ObjectiveConfig::default();
    close_all("grpo [1,0]", &grpo_advantage(&[1, 0]).map_err(e)?, &[1.0, -1.0], tol)?;
    close_all(
        "grpo [1,0,0,0]",
        &grpo_advantage(&[1, 0, 0, 0]).map_err(e)?,
        &[SQRT3, -INV_SQRT3, -INV_SQRT3, -INV_SQRT3],
        tol,
    )?;
    close_all(
        "continuation [1,0,0,0]",
        &continuation_advantages(&[1, 0, 0, 0]).map_err(e)?,
        &[SQRT3, -INV_SQRT3, -INV_SQRT3, -INV_SQRT3],
        tol,
    )?;
    close_all("continuation [1,1,0,0]", &continuation_advantages(&[1, 1, 0, 0]).map_err(e)?, &[1.0, 1.0, -1.0, -1.0], tol)?;
    close_all("continuation [0,0,0,0]", &continuation_advantages(&[0, 0, 0, 0]).map_err(e)?, &[0.0; 4], tol)?;
    for (r, want) in [([0u8, 0, 1, 0], 1u8), ([0, 0, 0, 0], 0), ([1, 1, 1, 1], 1)] {
        if recovery_indicator(&r) != want {
            return Err(format!("recovery {r:?} != {want}"));
        }
    }
    close("prefix [0,1,0,0]", prefix_advantage(&[0, 1, 0, 0], 0, 1).map_err(e)?, 1.0, tol)?;
    close("prefix [0,0,0,0]", prefix_advantage(&[0, 0, 0, 0], 0, 1).map_err(e)?, SQRT3, tol)?;
    close("prefix no recovery", prefix_advantage(&[0, 0, 0, 0], 0, 0).map_err(e)?, 0.0, tol)?;
    close("clip 2.0", clipped_term(2.0, 1.0, &cfg), 1.4, tol)?;
    close("clip 0.5", clipped_term(0.5, -1.0, &cfg), -0.8, tol)?;
    close("clip 1.0", clipped_term(1.0, 0.5, &cfg), 0.5, tol)?;
    close("two-step mean", (clipped_term(1.0, 1.0, &cfg) + clipped_term(2.0, 1.0, &cfg)) / 2.0, 1.2, tol)?;
    Ok("15 examples within 1e-9".into())
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut strict_fail, mut strict_cases) = (0, 0, 0);
    for i in 0..10_000 {
        let q: f64 = rng.random();
        let p_tool: f64 = rng.random();
        let base = q * p_tool;
        // Every 50th point sits on the equality boundary.
        let p_prefix = if i % 50 == 0 { base } else { base + (1.0 - base) * rng.random::<f64>() };
        let n = rng.random_range(1..=32u32);
        let params = CoverageParams { q, p_tool, p_prefix, n };
        let d = dominance_check(&params);
        let raw = coverage_raw(q, p_tool, n).map_err(e)?;
        let res = coverage_resample(p_prefix, n).map_err(e)?;
        if !(d.holds && res >= raw) {
            violations += 1;
        }
        if p_prefix > base && base > 0.0 && base < 1.0 {
            strict_cases += 1;
            if d.margin <= 0.0 {
                strict_fail += 1;
            }
        }
    }
    if violations > 0 || strict_fail > 0 {
        return Err(format!("{violations} violations, {strict_fail} non-strict margins"));
    }
    Ok(format!("0 violations over 10000 points, {strict_cases} strict margins > 0"))
}

fn criterion_3() -> Check {
    let params = CoverageParams { q: 0.3, p_tool: 0.2, p_prefix: 0.2, n: 4 };
    let mut ok = 0;
    for seed in 0..100 {
        let mc = monte_carlo_coverage(&params, 100_000, seed).map_err(e)?;
        ok += usize::from(mc.within(&params, 3.0));
    }
    let msg = format!("{ok}/100 seeds within 3 SE of (0.21925, 0.5904)");
    if ok >= 95 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_4() -> Check {
    let cfg = RunConfig {
        questions_per_step: 4,
        ..RunConfig::default()
    };
    let report = gradcheck(&cfg, 20, 4).map_err(e)?;
    let regimes: Vec<String> = report
        .cases
        .iter()
        .filter(|c| c.clipped_steps > 0)
        .map(|c| format!("{:?}", c.regime))
        .collect();
    let msg = format!(
        "max abs deviation {:.2e} over 20 cases, {} kink-adjacent steps excluded, clipped steps in {} cases",
        report.max_abs,
        report.excluded_steps,
        regimes.len()
    );
    if report.passed(1e-6) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_policy(base: &TabularPolicy, rng: &mut ChaCha8Rng, spread: f64) -> TabularPolicy {
    let mut p = base.clone();
    p.logits.iter_mut().for_each(|z| *z += rng.random_range(-spread..spread));
    p
}

struct RandomStep {
    groups: Vec<Group>,
    ranked: Vec<Vec<Candidate>>,
    results: Vec<ResampleResult>,
    cap: usize,
    k: usize,
    policy: TabularPolicy,
}

fn random_step(env: &EnvSpec, base: &TabularPolicy, seed: u64, resample_all: bool) -> Result<RandomStep, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(base, &mut rng, 1.5);
    let b = rng.random_range(1..=32usize);
    let n = rng.random_range(2..=8usize);
    let k = rng.random_range(2..=6usize);
    let r: f64 = rng.random_range(0.0..1.0);
    let cap = budget_cap(r, b, n);
    let mut groups = Vec::with_capacity(b);
    for _ in 0..b {
        let q = rng.random_range(0..env.num_questions as u32);
        let rollouts = (0..n).map(|_| sample_rollout(&policy, env, q, &mut rng)).collect();
        groups.push(Group::new(q, rollouts).map_err(e)?);
    }
    let ranked = groups
        .iter()
        .enumerate()
        .filter_map(|(s, g)| detect_trigger(s, g).map(|t| rank_candidates(g, &t)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let plan = allocate_budget(&ranked, k, cap);
    let results = if resample_all {
        resample(&plan, &groups, &policy, env, seed, 0).map_err(e)?
    } else {
        Vec::new()
    };
    Ok(RandomStep { groups, ranked, results, cap, k, policy })
}

/// Independent recount of advantage sources per physical step.
fn source_counts(batch: &AssembledBatch, results: &[ResampleResult]) -> HashMap<(usize, usize, usize, usize), usize> {
    let mut counts = HashMap::new();
    for (item, origin) in batch.items.iter().zip(&batch.origins) {
        for (t, &m) in item.mask.iter().enumerate() {
            if !m {
                continue;
            }
            let key = match *origin {
                ItemOrigin::Rollout { group, index } => (0, group, index, t),
                ItemOrigin::Continuation { result, k } => {
                    let c = &results[result].candidate;
                    if t <= c.prefix.cut_index {
                        (0, c.group_slot, c.source_index, t)
                    } else {
                        (1, result, k, t)
                    }
                }
            };
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

fn criterion_5() -> Check {
    let params = EnvParams::gap_env();
    let env = params.build().map_err(e)?;
    let base = params.initial_policy(&env).map_err(e)?;
    let cfg = ObjectiveConfig { beta: 0.01, ..Default::default() };
    let (mut unmasked_total, mut with_resample) = (0usize, 0usize);
    for seed in 0..1000u64 {
        let step = random_step(&env, &base, 5_000 + seed, true)?;
        let batch = assemble_step_losses(&step.groups, &step.results).map_err(e)?;
        with_resample += usize::from(!step.results.is_empty());
        let counts = source_counts(&batch, &step.results);
        if let Some((k, c)) = counts.iter().find(|(_, &c)| c != 1) {
            return Err(format!("seed {seed}: step {k:?} has {c} advantage sources"));
        }
        // Expected unmasked set: policy-emitted steps of every rollout, source
        // rollouts only up to the cut, continuations only after it.
        let mut expected = 0;
        let sources: HashMap<(usize, usize), usize> = step
            .results
            .iter()
            .map(|r| ((r.candidate.group_slot, r.candidate.source_index), r.candidate.prefix.cut_index))
            .collect();
        let emitted = |s: &axpo_core::trajectory::Step| s.segment.is_policy_emitted() && s.mask;
        for (g, group) in step.groups.iter().enumerate() {
            for (i, t) in group.rollouts.iter().enumerate() {
                let cut = sources.get(&(g, i)).copied().unwrap_or(usize::MAX);
                expected += t.steps.iter().enumerate().filter(|(j, s)| *j <= cut && emitted(s)).count();
            }
        }
        for r in &step.results {
            for c in &r.continuations {
                expected += c.steps.iter().enumerate().filter(|(j, s)| *j > r.candidate.prefix.cut_index && emitted(s)).count();
            }
        }
        if counts.len() != expected {
            return Err(format!("seed {seed}: {} unmasked steps, expected {expected}", counts.len()));
        }
        for (item, origin) in batch.items.iter().zip(&batch.origins) {
            let want = match origin {
                ItemOrigin::Continuation { .. } => Provenance::Continuation,
                ItemOrigin::Rollout { group, index } if sources.contains_key(&(*group, *index)) => Provenance::PrefixCredit,
                ItemOrigin::Rollout { .. } => Provenance::Standard,
            };
            if item.provenance != want {
                return Err(format!("seed {seed}: {origin:?} tagged {:?}", item.provenance));
            }
        }
        unmasked_total += counts.len();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_policy(&step.policy, &mut rng, 0.3);
        let before = surrogate_objective(&batch.items, &policy, &base, &cfg).map_err(e)?;
        let perturbed: Vec<LossItem> = batch
            .items
            .iter()
            .map(|item| {
                let mut item = item.clone();
                for t in 0..item.mask.len() {
                    if !item.mask[t] {
                        item.advantages[t] += rng.random_range(-100.0..100.0);
                    }
                }
                item
            })
            .collect();
        let after = surrogate_objective(&perturbed, &policy, &base, &cfg).map_err(e)?;
        if before != after {
            return Err(format!("seed {seed}: masked perturbation moved the objective by {}", after - before));
        }
    }
    Ok(format!(
        "1000 batches ({with_resample} with resampling), {unmasked_total} unmasked steps each with one source; masked perturbations change nothing"
    ))
}

/// Reference breadth-first allocation written from the rule itself.
fn oracle_allocation(ranked: &[Vec<Candidate>], k: usize, cap: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::new();
    let depth = ranked.iter().map(Vec::len).max().unwrap_or(0);
    for round in 0..depth {
        let mut offers: Vec<&Candidate> = ranked.iter().filter_map(|r| r.get(round)).collect();
        offers.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap().then(a.group_slot.cmp(&b.group_slot)));
        order.extend(offers.into_iter().map(|c| (c.group_slot, c.source_index)));
    }
    let mut out = Vec::new();
    for c in order {
        if (out.len() + 1) * k > cap {
            break;
        }
        out.push(c);
    }
    out
}

fn criterion_6() -> Check {
    let params = EnvParams::gap_env();
    let env = params.build().map_err(e)?;
    let base = params.initial_policy(&env).map_err(e)?;
    let (mut triggered, mut selected) = (0, 0);
    for seed in 0..1000u64 {
        let step = random_step(&env, &base, 90_000 + seed, false)?;
        let plan = allocate_budget(&step.ranked, step.k, step.cap);
        if plan.extra_continuations() > step.cap {
            return Err(format!("seed {seed}: {} continuations over cap {}", plan.extra_continuations(), step.cap));
        }
        if !is_breadth_first(&plan, &step.ranked) {
            return Err(format!("seed {seed}: breadth-first violated"));
        }
        let got: Vec<(usize, usize)> = plan.selected.iter().map(|c| (c.group_slot, c.source_index)).collect();
        if got != oracle_allocation(&step.ranked, step.k, step.cap) {
            return Err(format!("seed {seed}: allocation differs from the reference rule"));
        }
        triggered += step.ranked.len();
        selected += got.len();
    }
    Ok(format!("1000 steps, {triggered} triggered groups, {selected} prefixes selected, cap and breadth-first held"))
}

fn files_equal(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|err| format!("{}: {err}", a.join(f).display()))?;
        let y = std::fs::read(b.join(f)).map_err(|err| format!("{}: {err}", b.join(f).display()))?;
        if x != y {
            return Err(format!("{f} differs ({} vs {} bytes)", x.len(), y.len()));
        }
    }
    Ok(())
}

fn base_config(root: &Path, name: &str) -> RunConfig {
    RunConfig {
        output_dir: root.to_path_buf(),
        run_name: Some(name.into()),
        ..RunConfig::default()
    }
}

fn criterion_7(root: &Path) -> Check {
    let mut grpo = base_config(root, "c7-grpo");
    grpo.algorithm = Algorithm::Grpo;
    grpo.steps = 60;
    grpo.seeds = vec![3, 8];
    let mut axpo = grpo.clone();
    axpo.algorithm = Algorithm::Axpo;
    axpo.resample_ratio = 0.0;
    axpo.run_name = Some("c7-axpo".into());
    train(&grpo, false).map_err(e)?;
    train(&axpo, false).map_err(e)?;
    let mut bytes = 0;
    for &s in &grpo.seeds {
        let (a, b) = (seed_dir(&grpo.run_dir(), s), seed_dir(&axpo.run_dir(), s));
        files_equal(&a, &b, &[TRAJECTORY_FILE, AUDIT_FILE, METRICS_FILE, HISTOGRAM_FILE, CHECKPOINT_FILE])?;
        bytes += std::fs::metadata(a.join(TRAJECTORY_FILE)).map_err(e)?.len();
    }
    Ok(format!("r=0 logs byte-identical to GRPO over 2 seeds x 60 steps ({bytes} log bytes)"))
}

#[derive(Default)]
struct Oracle {
    rollouts: BTreeMap<u64, Vec<(u64, bool)>>,
    resamples: BTreeMap<u64, Vec<u64>>,
    eval: BTreeMap<u64, Vec<(u64, u64)>>,
}

fn parse_csv_cell(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().unwrap())
}

fn criterion_8(root: &Path) -> Check {
    let mut cfg = base_config(root, "c8");
    cfg.seeds = vec![42];
    cfg.eval_every = 10;
    train(&cfg, false).map_err(e)?;
    let dir = seed_dir(&cfg.run_dir(), 42);

    // Raw scan of the log, independent of the record types.
    let text = std::fs::read_to_string(dir.join(TRAJECTORY_FILE)).map_err(e)?;
    let mut by_step: BTreeMap<u64, Oracle> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(e)?;
        let step = v["step_index_in_training"].as_u64().unwrap();
        let q = v["question_id"].as_u64().unwrap();
        let reward = v["reward"].as_u64().unwrap();
        let tool = v["steps"].as_array().unwrap().iter().any(|s| s["seg"] == "C");
        let o = by_step.entry(step).or_default();
        match v["kind"].as_str().unwrap() {
            "rollout" => o.rollouts.entry(q).or_default().push((reward, tool)),
            "resample" => o.resamples.entry(q).or_default().push(reward),
            "eval" => o.eval.entry(q).or_default().push((v["rollout_index"].as_u64().unwrap(), reward)),
            other => return Err(format!("unknown kind {other}")),
        }
    }

    let csv = std::fs::read_to_string(dir.join(METRICS_FILE)).map_err(e)?;
    let rows: BTreeMap<u64, Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            (cells[0].parse().unwrap(), cells)
        })
        .collect();

    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let steps: Vec<u64> = rand::seq::index::sample(&mut rng, cfg.steps as usize, 100)
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let mut compared = 0;
    for s in &steps {
        let o = &by_step[s];
        let row = &rows[s];
        let (mut tool, mut total, mut tool_groups, mut tool_wrong, mut plain_groups, mut plain_wrong) = (0, 0, 0, 0, 0, 0);
        let (mut triggered, mut recovered, mut reward_sum) = (0, 0, 0u64);
        for (q, rs) in &o.rollouts {
            total += rs.len();
            reward_sum += rs.iter().map(|r| r.0).sum::<u64>();
            let t: Vec<u64> = rs.iter().filter(|r| r.1).map(|r| r.0).collect();
            let p: Vec<u64> = rs.iter().filter(|r| !r.1).map(|r| r.0).collect();
            tool += t.len();
            if !t.is_empty() {
                tool_groups += 1;
                if t.iter().all(|&r| r == 0) {
                    tool_wrong += 1;
                    triggered += 1;
                    if o.resamples.get(q).is_some_and(|v| v.contains(&1)) {
                        recovered += 1;
                    }
                }
            }
            if !p.is_empty() {
                plain_groups += 1;
                plain_wrong += usize::from(p.iter().all(|&r| r == 0));
            }
        }
        let (pass1, pass4) = if o.eval.is_empty() {
            (None, None)
        } else {
            let all: Vec<u64> = o.eval.values().flatten().map(|x| x.1).collect();
            let hit = o.eval.values().filter(|v| v.iter().any(|&(i, r)| i < 4 && r == 1)).count();
            (frac(all.iter().sum::<u64>() as usize, all.len()), frac(hit, o.eval.len()))
        };
        let extra: usize = o.resamples.values().map(Vec::len).sum();
        let want = [
            frac(tool, total),
            frac(tool_wrong - recovered, tool_groups),
            frac(plain_wrong, plain_groups),
            frac(recovered, triggered),
            frac(reward_sum as usize, total),
            pass1,
            pass4,
            Some(extra as f64),
            frac(tool_wrong, tool_groups),
        ];
        for (i, w) in want.iter().enumerate() {
            let got = parse_csv_cell(&row[i + 1]);
            if got != *w {
                return Err(format!("step {s}, column {}: pipeline {got:?}, recount {w:?}", i + 1));
            }
        }
        compared += 1;
    }
    let evals = steps.iter().filter(|s| !by_step[s].eval.is_empty()).count();
    Ok(format!("{compared} random steps match the raw-log recount exactly ({evals} with evaluation)"))
}

fn criterion_9(root: &Path) -> Check {
    let mut grpo = base_config(root, "c9-grpo");
    grpo.algorithm = Algorithm::Grpo;
    let mut axpo = base_config(root, "c9-axpo");
    axpo.algorithm = Algorithm::Axpo;
    train(&grpo, false).map_err(e)?;
    train(&axpo, false).map_err(e)?;
    let report = compare(grpo.run_dir(), axpo.run_dir()).map_err(e)?;
    let get = |name: &str| report.metric(name).ok_or_else(|| format!("missing {name}"));
    let tool = get("final_tool_use_rate")?;
    let wrong = get("final_all_wrong_tool")?;
    let recovery = get("mean_recovery_rate")?;
    let pass1 = get("final_pass1_eval")?;
    let d_tool = tool.mean_delta.unwrap_or(f64::NAN);
    let d_pass = pass1.mean_delta.unwrap_or(f64::NAN);
    let (w_grpo, w_axpo) = (wrong.mean_a.unwrap_or(f64::NAN), wrong.mean_b.unwrap_or(f64::NAN));
    let rec = recovery.mean_b.unwrap_or(0.0);
    let msg = format!(
        "tool use {:.3} -> {:.3} ({:+.1} pp), all-wrong tool {:.3} -> {:.3}, recovery {:.3}, pass@1 {:.3} -> {:.3} ({:+.1} pp)",
        tool.mean_a.unwrap_or(f64::NAN),
        tool.mean_b.unwrap_or(f64::NAN),
        100.0 * d_tool,
        w_grpo,
        w_axpo,
        rec,
        pass1.mean_a.unwrap_or(f64::NAN),
        pass1.mean_b.unwrap_or(f64::NAN),
        100.0 * d_pass
    );
    if d_tool >= 0.10 && w_axpo < w_grpo && rec > 0.0 && d_pass >= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10(root: &Path) -> Check {
    let mut whole = base_config(root, "c10-whole");
    whole.steps = 50;
    whole.seeds = vec![10];
    whole.checkpoint_every = 10;
    whole.eval_every = 10;
    let mut split = whole.clone();
    split.run_name = Some("c10-split".into());
    train(&whole, false).map_err(e)?;
    // Interrupt mid-way between checkpoints, then resume from step 20.
    let partial = train_seed(&split, 10, Some(StopAt(25))).map_err(e)?;
    if !partial.metrics.is_empty() {
        return Err("interrupted run reported metrics".into());
    }
    resume_seed(&split, 10).map_err(e)?;
    files_equal(
        &seed_dir(&whole.run_dir(), 10),
        &seed_dir(&split.run_dir(), 10),
        &[TRAJECTORY_FILE, AUDIT_FILE, METRICS_FILE, HISTOGRAM_FILE, CHECKPOINT_FILE],
    )?;
    Ok("50-step run interrupted at step 25 and resumed from the step-20 checkpoint is byte-identical".into())
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let checks: Vec<Criterion> = vec![
        (1, "formula exactness", Duration::from_secs(1), Box::new(criterion_1)),
        (2, "coverage dominance", Duration::from_secs(5), Box::new(criterion_2)),
        (3, "Monte Carlo vs closed form", Duration::from_secs(30), Box::new(criterion_3)),
        (4, "gradient check", Duration::from_secs(60), Box::new(criterion_4)),
        (5, "masking and partition", Duration::from_secs(600), Box::new(criterion_5)),
        (6, "budget and breadth-first", Duration::from_secs(600), Box::new(criterion_6)),
        (7, "r=0 degeneracy", Duration::from_secs(600), Box::new(|| criterion_7(root))),
        (8, "diagnostics oracle", Duration::from_secs(600), Box::new(|| criterion_8(root))),
        (9, "directional dynamics", Duration::from_secs(600), Box::new(|| criterion_9(root))),
        (10, "determinism and resume", Duration::from_secs(600), Box::new(|| criterion_10(root))),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {:.0?} limit", limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {id:>2} ({name}) [{:.2?}]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
