//! Tabular softmax policy over the environment's decision nodes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ActionId, Segment, Trajectory, TOOL_OPEN};

/// Open-node choice that skips tool use.
pub const NO_TOOL: ActionId = 0;
/// Follow-up choices after an observation.
pub const ANSWER_NOW: ActionId = 0;
pub const RETRY: ActionId = 1;
/// Observation ids emitted by the environment.
pub const OBS_MISS: ActionId = 0;
pub const OBS_HIT: ActionId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    /// First thought: `NO_TOOL` or intent `1..=m`.
    Open,
    /// First call step: which variant realizes the intent.
    Variant { intent: usize },
    /// Remaining call steps: argument tokens.
    Arg {
        intent: usize,
        variant: usize,
        position: usize,
    },
    /// Thought after an observation: answer or call again.
    FollowUp { observation: usize },
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub question: u32,
    pub kind: NodeKind,
}

impl NodeKey {
    pub fn new(question: u32, kind: NodeKind) -> Self {
        NodeKey { question, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub num_questions: usize,
    pub intents: usize,
    pub variants: usize,
    /// Tool-call steps after the opening marker (first one picks the variant).
    pub call_steps: usize,
    pub arg_choices: usize,
    pub answer_choices: usize,
}

impl PolicyLayout {
    fn open_len(&self) -> usize {
        self.intents + 1
    }

    fn args_per_variant(&self) -> usize {
        (self.call_steps - 1) * self.arg_choices
    }

    fn block_size(&self) -> usize {
        self.open_len()
            + self.intents * self.variants
            + self.intents * self.variants * self.args_per_variant()
            + 2 * 2
            + self.answer_choices
    }

    pub fn num_params(&self) -> usize {
        self.num_questions * self.block_size()
    }

    pub fn num_choices(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Open => self.open_len(),
            NodeKind::Variant { .. } => self.variants,
            NodeKind::Arg { .. } => self.arg_choices,
            NodeKind::FollowUp { .. } => 2,
            NodeKind::Answer => self.answer_choices,
        }
    }

    fn check_node(&self, key: NodeKey) -> bool {
        (key.question as usize) < self.num_questions
            && match key.kind {
                NodeKind::Open | NodeKind::Answer => true,
                NodeKind::Variant { intent } => intent < self.intents,
                NodeKind::Arg {
                    intent,
                    variant,
                    position,
                } => intent < self.intents && variant < self.variants && position + 1 < self.call_steps,
                NodeKind::FollowUp { observation } => observation < 2,
            }
    }

    /// Slice of the flat logit vector owned by `key`.
    pub fn node_range(&self, key: NodeKey) -> Range<usize> {
        debug_assert!(self.check_node(key), "{key:?} outside {self:?}");
        let base = key.question as usize * self.block_size();
        let variants_base = self.open_len();
        let args_base = variants_base + self.intents * self.variants;
        let follow_base = args_base + self.intents * self.variants * self.args_per_variant();
        let answer_base = follow_base + 4;
        let (start, len) = match key.kind {
            NodeKind::Open => (0, self.open_len()),
            NodeKind::Variant { intent } => (variants_base + intent * self.variants, self.variants),
            NodeKind::Arg {
                intent,
                variant,
                position,
            } => (
                args_base
                    + (intent * self.variants + variant) * self.args_per_variant()
                    + position * self.arg_choices,
                self.arg_choices,
            ),
            NodeKind::FollowUp { observation } => (follow_base + observation * 2, 2),
            NodeKind::Answer => (answer_base, self.answer_choices),
        };
        base + start..base + start + len
    }

    /// Every decision node of one question.
    pub fn question_nodes(&self, question: u32) -> Vec<NodeKey> {
        let mut kinds = vec![NodeKind::Open];
        for intent in 0..self.intents {
            kinds.push(NodeKind::Variant { intent });
        }
        for intent in 0..self.intents {
            for variant in 0..self.variants {
                for position in 0..self.call_steps - 1 {
                    kinds.push(NodeKind::Arg {
                        intent,
                        variant,
                        position,
                    });
                }
            }
        }
        kinds.push(NodeKind::FollowUp { observation: 0 });
        kinds.push(NodeKind::FollowUp { observation: 1 });
        kinds.push(NodeKind::Answer);
        kinds.into_iter().map(|k| NodeKey::new(question, k)).collect()
    }

    /// Maps every step of `traj` to the decision node that emitted it, or `None`
    /// for steps without a decision (opening marker, observations).
    pub fn decision_contexts(&self, traj: &Trajectory) -> Result<Vec<Option<NodeKey>>> {
        let q = traj.question_id;
        if q as usize >= self.num_questions {
            return Err(Error::Grammar(format!("question {q} outside the policy")));
        }
        let bad = |i: usize, what: &str| Error::Grammar(format!("step {i}: {what}"));
        let mut out = Vec::with_capacity(traj.steps.len());
        let mut seen_think = false;
        let mut intent: Option<usize> = None;
        let mut last_obs: Option<usize> = None;
        let mut call_pos = 0usize;
        let mut variant = 0usize;
        for (i, step) in traj.steps.iter().enumerate() {
            let a = step.action_id as usize;
            let kind = match step.segment {
                Segment::Think => {
                    let kind = if seen_think {
                        let observation = last_obs
                            .take()
                            .ok_or_else(|| bad(i, "follow-up thought without observation"))?;
                        NodeKind::FollowUp { observation }
                    } else {
                        NodeKind::Open
                    };
                    if kind == NodeKind::Open && a > 0 {
                        intent = Some(a - 1);
                    }
                    seen_think = true;
                    Some(kind)
                }
                Segment::ToolCall if step.action_id == TOOL_OPEN => {
                    if intent.is_none() {
                        return Err(bad(i, "tool call without an intent"));
                    }
                    call_pos = 0;
                    None
                }
                Segment::ToolCall => {
                    let intent = intent.ok_or_else(|| bad(i, "tool call without an intent"))?;
                    let kind = if call_pos == 0 {
                        variant = a;
                        NodeKind::Variant { intent }
                    } else {
                        NodeKind::Arg {
                            intent,
                            variant,
                            position: call_pos - 1,
                        }
                    };
                    call_pos += 1;
                    Some(kind)
                }
                Segment::Observation => {
                    if a > 1 {
                        return Err(bad(i, "unknown observation id"));
                    }
                    last_obs = Some(a);
                    None
                }
                Segment::Answer => Some(NodeKind::Answer),
            };
            if let Some(kind) = kind {
                let key = NodeKey::new(q, kind);
                if !self.check_node(key) || a >= self.num_choices(kind) {
                    return Err(bad(i, &format!("action {a} invalid at {kind:?}")));
                }
                out.push(Some(key));
            } else {
                out.push(None);
            }
        }
        Ok(out)
    }
}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = logits
        .iter()
        .map(|&z| (z / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&z| z / temperature - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub layout: PolicyLayout,
    pub temperature: f64,
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(layout: PolicyLayout, temperature: f64) -> Self {
        TabularPolicy {
            layout,
            temperature,
            logits: vec![0.0; layout.num_params()],
        }
    }

    pub fn node_logits(&self, key: NodeKey) -> &[f64] {
        &self.logits[self.layout.node_range(key)]
    }

    pub fn node_logits_mut(&mut self, key: NodeKey) -> &mut [f64] {
        let r = self.layout.node_range(key);
        &mut self.logits[r]
    }

    pub fn probs(&self, key: NodeKey) -> Vec<f64> {
        softmax(self.node_logits(key), self.temperature)
    }

    pub fn log_probs(&self, key: NodeKey) -> Vec<f64> {
        log_softmax(self.node_logits(key), self.temperature)
    }

    pub fn log_prob(&self, key: NodeKey, action: ActionId) -> f64 {
        self.log_probs(key)[action as usize]
    }

    /// Total probability of choosing any intent at the open node.
    pub fn tool_mass(&self, question: u32) -> f64 {
        1.0 - self.probs(NodeKey::new(question, NodeKind::Open))[NO_TOOL as usize]
    }
}

/// Exact `KL(policy(.|node) || reference(.|node))`.
pub fn exact_kl(policy: &TabularPolicy, reference: &TabularPolicy, key: NodeKey) -> f64 {
    kl_from_log_probs(&policy.log_probs(key), &reference.log_probs(key))
}

pub(crate) fn kl_from_log_probs(logp: &[f64], logr: &[f64]) -> f64 {
    if logp == logr {
        return 0.0;
    }
    logp.iter()
        .zip(logr)
        .map(|(&lp, &lr)| lp.exp() * (lp - lr))
        .sum::<f64>()
        .max(0.0)
}
