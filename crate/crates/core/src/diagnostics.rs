//! Training-dynamics and evaluation metrics, computed from the persisted
//! trajectory log.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::axpo::detect_trigger;
use crate::error::{Error, Result};
use crate::trajectory::{classify_subgroups, ActionId, Group, RecordKind, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolUse {
    pub rate: f64,
    /// Number of questions by tool-using rollout count, bins `0..=N`.
    pub histogram: Vec<u64>,
}

/// Fraction of rollouts with at least one tool call.
pub fn tool_use_rate(groups: &[Group]) -> ToolUse {
    let n_max = groups.iter().map(Group::len).max().unwrap_or(0);
    let mut histogram = vec![0u64; n_max + 1];
    let (mut tool, mut total) = (0usize, 0usize);
    for g in groups {
        let (t, _) = classify_subgroups(g);
        histogram[t.len()] += 1;
        tool += t.len();
        total += g.len();
    }
    ToolUse {
        rate: if total == 0 { 0.0 } else { tool as f64 / total as f64 },
        histogram,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AllWrong {
    /// Among groups with a non-empty tool-using subgroup, the share where it is all wrong.
    pub tool: Option<f64>,
    pub no_tool: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn all_wrong_rate(groups: &[Group]) -> AllWrong {
    let (mut tool, mut tool_wrong, mut plain, mut plain_wrong) = (0, 0, 0, 0);
    for g in groups {
        let (t, p) = classify_subgroups(g);
        let wrong = |idx: &[usize]| idx.iter().all(|&i| g.rollouts[i].reward == 0);
        if !t.is_empty() {
            tool += 1;
            tool_wrong += usize::from(wrong(&t));
        }
        if !p.is_empty() {
            plain += 1;
            plain_wrong += usize::from(wrong(&p));
        }
    }
    AllWrong {
        tool: ratio(tool_wrong, tool),
        no_tool: ratio(plain_wrong, plain),
    }
}

/// Outcome of resampling for one triggered group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TriggerOutcome {
    pub question_id: u32,
    pub selected_prefixes: usize,
    pub recovered: bool,
}

/// Share of triggered groups in which some selected prefix recovered; absent
/// when nothing triggered.
pub fn recovery_rate(outcomes: &[TriggerOutcome]) -> Option<f64> {
    ratio(outcomes.iter().filter(|o| o.recovered).count(), outcomes.len())
}

/// pass@1 is the mean per-rollout reward; pass@k the share of questions with a
/// correct answer among their first `k` rollouts.
pub fn pass_at_k(rewards: &BTreeMap<u32, Vec<u8>>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    for (&q, r) in rewards {
        if r.len() < k {
            return Err(Error::InsufficientRollouts {
                question_id: q,
                available: r.len(),
                k,
            });
        }
    }
    if rewards.is_empty() {
        return Ok(0.0);
    }
    if k == 1 {
        let (sum, n) = rewards
            .values()
            .flatten()
            .fold((0usize, 0usize), |(s, n), &r| (s + r as usize, n + 1));
        return Ok(sum as f64 / n as f64);
    }
    let hit = rewards.values().filter(|r| r[..k].contains(&1)).count();
    Ok(hit as f64 / rewards.len() as f64)
}

/// Number of distinct tool-call action sequences.
pub fn cluster_count(calls: &[Vec<ActionId>]) -> usize {
    calls.iter().collect::<HashSet<_>>().len()
}

/// Records of one training step, regrouped.
#[derive(Debug, Clone, Default)]
pub struct StepRecords {
    pub groups: Vec<Group>,
    /// Resample rewards by `(question_id, source_index)`.
    pub resamples: BTreeMap<(u32, usize), Vec<u8>>,
    pub eval: BTreeMap<u32, Vec<u8>>,
}

impl StepRecords {
    pub fn outcomes(&self) -> Vec<TriggerOutcome> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(slot, g)| detect_trigger(slot, g))
            .map(|t| {
                let prefixes: Vec<&Vec<u8>> = self
                    .resamples
                    .range((t.question_id, 0)..=(t.question_id, usize::MAX))
                    .map(|(_, r)| r)
                    .collect();
                TriggerOutcome {
                    question_id: t.question_id,
                    selected_prefixes: prefixes.len(),
                    recovered: prefixes.iter().any(|r| r.contains(&1)),
                }
            })
            .collect()
    }
}

/// Rollout records of one step: question, then (rollout index, record).
type RolloutIndex<'a> = BTreeMap<u32, Vec<(u32, &'a TrajectoryRecord)>>;

/// Splits a log into per-step record sets, in step order.
pub fn group_records(records: &[TrajectoryRecord]) -> Result<BTreeMap<u32, StepRecords>> {
    let mut rollouts: BTreeMap<u32, RolloutIndex> = BTreeMap::new();
    let mut steps: BTreeMap<u32, StepRecords> = BTreeMap::new();
    for r in records {
        let q = r.trajectory.question_id;
        let entry = steps.entry(r.step).or_default();
        match r.kind {
            RecordKind::Rollout => rollouts.entry(r.step).or_default().entry(q).or_default().push((r.rollout_index, r)),
            RecordKind::Resample => {
                let src = r.source_index().ok_or_else(|| Error::Parse {
                    line: 0,
                    field: "source_prefix_id".into(),
                    message: format!("resample record at step {} has no source", r.step),
                })?;
                entry.resamples.entry((q, src)).or_default().push(r.trajectory.reward);
            }
            RecordKind::Eval => entry.eval.entry(q).or_default().push(r.trajectory.reward),
        }
    }
    for (step, by_q) in rollouts {
        let entry = steps.entry(step).or_default();
        for (q, mut rs) in by_q {
            rs.sort_by_key(|(i, _)| *i);
            entry
                .groups
                .push(Group::new(q, rs.into_iter().map(|(_, r)| r.trajectory.clone()).collect())?);
        }
    }
    Ok(steps)
}

/// One row of the per-step metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u32,
    pub tool_use_rate: Option<f64>,
    /// After resampling: recovered groups no longer count as all wrong.
    pub all_wrong_tool: Option<f64>,
    pub all_wrong_no_tool: Option<f64>,
    pub recovery_rate: Option<f64>,
    pub mean_reward: Option<f64>,
    pub pass1_eval: Option<f64>,
    pub pass4_eval: Option<f64>,
    pub extra_continuations: usize,
    pub all_wrong_tool_pre: Option<f64>,
    #[serde(skip)]
    pub histogram: Vec<u64>,
}

pub const METRICS_HEADER: &str = "step,tool_use_rate,all_wrong_tool,all_wrong_no_tool,recovery_rate,mean_reward,pass1_eval,pass4_eval,extra_continuations,all_wrong_tool_pre";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StepMetrics {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.tool_use_rate),
            cell(self.all_wrong_tool),
            cell(self.all_wrong_no_tool),
            cell(self.recovery_rate),
            cell(self.mean_reward),
            cell(self.pass1_eval),
            cell(self.pass4_eval),
            self.extra_continuations,
            cell(self.all_wrong_tool_pre),
        )
    }

    pub fn compute(step: u32, recs: &StepRecords) -> Result<Self> {
        let has_rollouts = !recs.groups.is_empty();
        let tool = tool_use_rate(&recs.groups);
        let wrong = all_wrong_rate(&recs.groups);
        let outcomes = recs.outcomes();
        let tool_groups = recs.groups.iter().filter(|g| g.rollouts.iter().any(|t| t.is_tool_using())).count();
        let recovered = outcomes.iter().filter(|o| o.recovered).count();
        let rewards: Vec<u8> = recs.groups.iter().flat_map(Group::rewards).collect();
        let (pass1, pass4) = if recs.eval.is_empty() {
            (None, None)
        } else {
            (Some(pass_at_k(&recs.eval, 1)?), Some(pass_at_k(&recs.eval, 4)?))
        };
        Ok(StepMetrics {
            step,
            tool_use_rate: has_rollouts.then_some(tool.rate),
            all_wrong_tool: ratio(outcomes.len() - recovered, tool_groups),
            all_wrong_no_tool: wrong.no_tool,
            recovery_rate: recovery_rate(&outcomes),
            mean_reward: ratio(rewards.iter().map(|&r| r as usize).sum(), rewards.len()),
            pass1_eval: pass1,
            pass4_eval: pass4,
            extra_continuations: recs.resamples.values().map(Vec::len).sum(),
            all_wrong_tool_pre: wrong.tool,
            histogram: if has_rollouts { tool.histogram } else { Vec::new() },
        })
    }
}

/// Metrics for every step present in the log.
pub fn metrics_from_records(records: &[TrajectoryRecord]) -> Result<Vec<StepMetrics>> {
    group_records(records)?
        .iter()
        .map(|(&step, recs)| StepMetrics::compute(step, recs))
        .collect()
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[StepMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tool-use histograms, one row per step with rollouts.
pub fn write_histograms(path: impl AsRef<Path>, rows: &[StepMetrics]) -> Result<()> {
    let path = path.as_ref();
    let bins = rows.iter().map(|r| r.histogram.len()).max().unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        let header: Vec<String> = (0..bins).map(|b| format!("tool_{b}")).collect();
        writeln!(out, "step,{}", header.join(","))?;
        for r in rows.iter().filter(|r| !r.histogram.is_empty()) {
            let mut h = r.histogram.clone();
            h.resize(bins, 0);
            let cells: Vec<String> = h.iter().map(u64::to_string).collect();
            writeln!(out, "{},{}", r.step, cells.join(","))?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
