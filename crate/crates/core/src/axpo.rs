//! Tool-call resampling.
//!
//! A group triggers when its tool-using subgroup is non-empty and entirely
//! wrong. Each tool-using rollout of a triggered group offers one candidate:
//! its prefix up to the first `<tool_call>` opening. Candidates are ranked by
//! ascending confidence and allocated breadth-first under a budget of
//! `floor(r * B * N)` extra continuations, `K` per selected prefix.
//!
//! Advantage streams after resampling:
//!
//! | steps                               | advantage                          |
//! |-------------------------------------|------------------------------------|
//! | unselected rollouts, all steps      | group-normalized (standard)        |
//! | selected source, prefix steps       | recovery-substituted prefix credit |
//! | selected source, after the prefix   | masked                             |
//! | continuation, shared prefix         | masked                             |
//! | continuation, after the prefix      | per-prefix group-normalized        |

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{grpo_advantage, LossItem, Provenance};
use crate::error::{Error, Result};
use crate::policy_env::{confidence, sample_continuation, EnvSpec, TabularPolicy};
use crate::rng::{self, Purpose};
use crate::trajectory::{classify_subgroups, first_tool_prefix, Group, Prefix, Trajectory};

/// A group whose tool-using subgroup is non-empty and all wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggeredGroup {
    /// Position of the group in the step's batch.
    pub group_slot: usize,
    pub question_id: u32,
    pub tool_using_indices: Vec<usize>,
}

pub fn detect_trigger(group_slot: usize, group: &Group) -> Option<TriggeredGroup> {
    let (tool, _) = classify_subgroups(group);
    let all_wrong = tool.iter().all(|&i| group.rollouts[i].reward == 0);
    (!tool.is_empty() && all_wrong).then_some(TriggeredGroup {
        group_slot,
        question_id: group.question_id,
        tool_using_indices: tool,
    })
}

/// A prefix that may be resampled.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub group_slot: usize,
    pub question_id: u32,
    pub source_index: usize,
    pub prefix: Prefix,
    pub confidence: f64,
}

/// One candidate per tool-using rollout, duplicates of an earlier rollout's
/// prefix dropped, in ascending confidence with lower rollout index first on ties.
pub fn rank_candidates(group: &Group, triggered: &TriggeredGroup) -> Result<Vec<Candidate>> {
    let mut out: Vec<Candidate> = Vec::with_capacity(triggered.tool_using_indices.len());
    let mut indices = triggered.tool_using_indices.clone();
    indices.sort_unstable();
    for i in indices {
        let traj = &group.rollouts[i];
        let prefix = first_tool_prefix(traj)?;
        if out.iter().any(|c| c.prefix.same_tokens(&prefix)) {
            continue;
        }
        let confidence = confidence(traj, &prefix)?;
        out.push(Candidate {
            group_slot: triggered.group_slot,
            question_id: group.question_id,
            source_index: i,
            prefix,
            confidence,
        });
    }
    out.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then(a.source_index.cmp(&b.source_index))
    });
    Ok(out)
}

/// `floor(r * B * N)`.
pub fn budget_cap(ratio: f64, questions: usize, group_size: usize) -> usize {
    (ratio * (questions * group_size) as f64).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    pub selected: Vec<Candidate>,
    pub k: usize,
    pub cap: usize,
}

impl ResamplePlan {
    pub fn extra_continuations(&self) -> usize {
        self.selected.len() * self.k
    }
}

/// Breadth-first allocation over per-question ranked candidate lists.
///
/// Round `j` offers every question's rank-`j` candidate, lowest confidence
/// first; allocation stops at the first prefix whose `K` continuations would
/// exceed `cap`.
pub fn allocate_budget(ranked: &[Vec<Candidate>], k: usize, cap: usize) -> ResamplePlan {
    let max_prefixes = cap.checked_div(k).unwrap_or(0);
    let mut selected = Vec::new();
    let depth = ranked.iter().map(Vec::len).max().unwrap_or(0);
    'rounds: for round in 0..depth {
        let mut offers: Vec<&Candidate> = ranked.iter().filter_map(|r| r.get(round)).collect();
        offers.sort_by(|a, b| {
            a.confidence
                .total_cmp(&b.confidence)
                .then(a.group_slot.cmp(&b.group_slot))
        });
        for c in offers {
            if selected.len() == max_prefixes {
                break 'rounds;
            }
            selected.push(c.clone());
        }
    }
    ResamplePlan { selected, k, cap }
}

/// Whether `plan` respects breadth-first allocation over `ranked`: no question
/// has two more prefixes than another question that still has candidates left.
pub fn is_breadth_first(plan: &ResamplePlan, ranked: &[Vec<Candidate>]) -> bool {
    let counts: Vec<(usize, usize)> = ranked
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let slot = r[0].group_slot;
            let n = plan.selected.iter().filter(|c| c.group_slot == slot).count();
            (n, r.len())
        })
        .collect();
    let max = counts.iter().map(|&(n, _)| n).max().unwrap_or(0);
    counts
        .iter()
        .filter(|&&(n, avail)| n < avail)
        .all(|&(n, _)| n + 1 >= max)
}

/// Group-normalized advantages within one prefix's continuations.
pub fn continuation_advantages(rewards: &[u8]) -> Result<Vec<f64>> {
    grpo_advantage(rewards)
}

/// 1 iff any continuation is correct.
pub fn recovery_indicator(rewards: &[u8]) -> u8 {
    debug_assert!(!rewards.is_empty());
    u8::from(rewards.contains(&1))
}

/// The source's advantage after substituting `recovery` for its own reward.
pub fn prefix_advantage(group_rewards: &[u8], source_index: usize, recovery: u8) -> Result<f64> {
    if source_index >= group_rewards.len() {
        return Err(Error::SourceNotInGroup {
            index: source_index,
            size: group_rewards.len(),
        });
    }
    let mut substituted = group_rewards.to_vec();
    substituted[source_index] = recovery;
    Ok(grpo_advantage(&substituted)?[source_index])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleResult {
    pub candidate: Candidate,
    pub continuations: Vec<Arc<Trajectory>>,
    pub rewards: Vec<u8>,
    pub advantages: Vec<f64>,
    pub recovery: u8,
    pub prefix_advantage: f64,
}

impl ResampleResult {
    pub fn new(candidate: Candidate, continuations: Vec<Trajectory>, group_rewards: &[u8]) -> Result<Self> {
        let rewards: Vec<u8> = continuations.iter().map(|t| t.reward).collect();
        let advantages = continuation_advantages(&rewards)?;
        let recovery = recovery_indicator(&rewards);
        let prefix_advantage = prefix_advantage(group_rewards, candidate.source_index, recovery)?;
        Ok(ResampleResult {
            candidate,
            continuations: continuations.into_iter().map(Arc::new).collect(),
            rewards,
            advantages,
            recovery,
            prefix_advantage,
        })
    }
}

/// Draws `K` continuations for every selected prefix. Each continuation has its
/// own RNG stream keyed by `(seed, step, group slot, source index, k)`.
pub fn resample(
    plan: &ResamplePlan,
    groups: &[Group],
    policy: &TabularPolicy,
    env: &EnvSpec,
    seed: u64,
    step: u64,
) -> Result<Vec<ResampleResult>> {
    plan.selected
        .par_iter()
        .map(|c| {
            let group = groups.get(c.group_slot).ok_or(Error::SourceNotInGroup {
                index: c.group_slot,
                size: groups.len(),
            })?;
            let continuations = (0..plan.k)
                .map(|k| {
                    let mut rng = rng::stream(
                        seed,
                        Purpose::Resample,
                        &[step, c.group_slot as u64, c.source_index as u64, k as u64],
                    );
                    sample_continuation(policy, env, &c.prefix, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            ResampleResult::new(c.clone(), continuations, &group.rewards())
        })
        .collect()
}

/// Identity of a loss item within an assembled batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemOrigin {
    Rollout { group: usize, index: usize },
    Continuation { result: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch {
    pub items: Vec<LossItem>,
    pub origins: Vec<ItemOrigin>,
    /// Cut index of the prefix shared with each resample result's source.
    cuts: Vec<(usize, usize, usize)>,
}

impl AssembledBatch {
    /// Physical identity of step `t` of item `i`: shared-prefix steps of a
    /// continuation are the source rollout's own steps.
    fn physical(&self, i: usize, t: usize) -> (ItemOrigin, usize) {
        match self.origins[i] {
            ItemOrigin::Continuation { result, .. } => {
                let (group, index, cut) = self.cuts[result];
                if t <= cut {
                    (ItemOrigin::Rollout { group, index }, t)
                } else {
                    (self.origins[i], t)
                }
            }
            origin => (origin, t),
        }
    }

    /// Verifies that every unmasked step receives exactly one advantage and
    /// returns the provenance of each.
    pub fn provenance_map(&self) -> Result<HashMap<(ItemOrigin, usize), Provenance>> {
        let mut seen = HashMap::new();
        for (i, item) in self.items.iter().enumerate() {
            for t in item.unmasked() {
                match seen.entry(self.physical(i, t)) {
                    Entry::Occupied(_) => {
                        return Err(Error::ConflictingAssignment {
                            stream: format!("{:?}", self.origins[i]),
                            step: t,
                        })
                    }
                    Entry::Vacant(v) => {
                        v.insert(item.provenance);
                    }
                }
            }
        }
        Ok(seen)
    }
}

/// Builds the loss batch for one step: standard GRPO items for every rollout,
/// with selected sources switched to prefix credit, followed by the
/// continuation items of each resample result.
pub fn assemble_step_losses(groups: &[Group], results: &[ResampleResult]) -> Result<AssembledBatch> {
    let mut sources: HashMap<(usize, usize), &ResampleResult> = HashMap::new();
    for r in results {
        let c = &r.candidate;
        let group = groups.get(c.group_slot).ok_or(Error::SourceNotInGroup {
            index: c.group_slot,
            size: groups.len(),
        })?;
        let source = group.rollouts.get(c.source_index).ok_or(Error::SourceNotInGroup {
            index: c.source_index,
            size: group.len(),
        })?;
        if !c.prefix.is_prefix_of(source) {
            return Err(Error::InvalidPrefix(format!(
                "prefix of question {} does not match source rollout {}",
                c.question_id, c.source_index
            )));
        }
        if sources.insert((c.group_slot, c.source_index), r).is_some() {
            return Err(Error::ConflictingAssignment {
                stream: format!("source {}:{}", c.group_slot, c.source_index),
                step: 0,
            });
        }
    }

    let mut items = Vec::new();
    let mut origins = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let standard = grpo_advantage(&group.rewards())?;
        for (i, traj) in group.rollouts.iter().enumerate() {
            let traj = Arc::new(traj.clone());
            let item = match sources.get(&(g, i)) {
                Some(r) => {
                    let cut = r.candidate.prefix.cut_index;
                    let mut item = LossItem::broadcast(traj, r.prefix_advantage, Provenance::PrefixCredit);
                    item.mask.iter_mut().skip(cut + 1).for_each(|m| *m = false);
                    item
                }
                None => LossItem::broadcast(traj, standard[i], Provenance::Standard),
            };
            items.push(item);
            origins.push(ItemOrigin::Rollout { group: g, index: i });
        }
    }

    let mut cuts = Vec::with_capacity(results.len());
    for (j, r) in results.iter().enumerate() {
        let cut = r.candidate.prefix.cut_index;
        cuts.push((r.candidate.group_slot, r.candidate.source_index, cut));
        for (k, cont) in r.continuations.iter().enumerate() {
            if !r.candidate.prefix.is_prefix_of(cont) {
                return Err(Error::InvalidPrefix(format!(
                    "continuation {k} of result {j} does not share its prefix"
                )));
            }
            let mut item = LossItem::broadcast(Arc::clone(cont), r.advantages[k], Provenance::Continuation);
            item.mask.iter_mut().take(cut + 1).for_each(|m| *m = false);
            items.push(item);
            origins.push(ItemOrigin::Continuation { result: j, k });
        }
    }

    let batch = AssembledBatch { items, origins, cuts };
    batch.provenance_map()?;
    Ok(batch)
}

/// Per-prefix audit line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: u32,
    pub question_id: u32,
    pub source_index: usize,
    pub confidence: f64,
    pub rewards: Vec<u8>,
    pub recovery: u8,
}

impl AuditEntry {
    pub fn from_result(step: u32, r: &ResampleResult) -> Self {
        AuditEntry {
            step,
            question_id: r.candidate.question_id,
            source_index: r.candidate.source_index,
            confidence: r.candidate.confidence,
            rewards: r.rewards.clone(),
            recovery: r.recovery,
        }
    }
}
