//! Agentic trajectory data model.
//!
//! A trajectory is a flat run of [`Step`]s, each tagged with the segment it
//! belongs to. Turns follow the run grammar `(THINK TOOL_CALL OBSERVATION)* THINK? ANSWER?`
//! with ANSWER terminal. Tool calls are short runs of discrete action ids whose
//! first step is the reserved opening marker [`TOOL_OPEN`].

mod record;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use record::{read_log, write_log, LogWriter, RecordKind, TrajectoryRecord};

pub type ActionId = u16;

/// Reserved action id for the `<tool_call>` opening marker.
pub const TOOL_OPEN: ActionId = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    #[serde(rename = "T")]
    Think,
    #[serde(rename = "C")]
    ToolCall,
    #[serde(rename = "O")]
    Observation,
    #[serde(rename = "A")]
    Answer,
}

impl Segment {
    pub fn is_policy_emitted(self) -> bool {
        self != Segment::Observation
    }

    pub fn letter(self) -> char {
        match self {
            Segment::Think => 'T',
            Segment::ToolCall => 'C',
            Segment::Observation => 'O',
            Segment::Answer => 'A',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action_id: ActionId,
    pub segment: Segment,
    /// Natural-log probability under the rollout policy. Never set on observations.
    pub logp_old: Option<f64>,
    /// Whether the step receives gradient.
    pub mask: bool,
}

impl Step {
    /// A policy decision step, trainable.
    pub fn decision(segment: Segment, action_id: ActionId, logp_old: f64) -> Self {
        Step {
            action_id,
            segment,
            logp_old: Some(logp_old),
            mask: true,
        }
    }

    /// The `<tool_call>` opening marker. It is implied by the intent chosen in the
    /// preceding thought, so it has probability one and carries no gradient.
    pub fn tool_open() -> Self {
        Step {
            action_id: TOOL_OPEN,
            segment: Segment::ToolCall,
            logp_old: Some(0.0),
            mask: false,
        }
    }

    pub fn observation(action_id: ActionId) -> Self {
        Step {
            action_id,
            segment: Segment::Observation,
            logp_old: None,
            mask: false,
        }
    }

    /// Same action in the same segment; log-probabilities and masks are ignored.
    pub fn same_token(&self, other: &Step) -> bool {
        self.action_id == other.action_id && self.segment == other.segment
    }

    fn check(&self, index: usize) -> Result<()> {
        if self.segment == Segment::Observation {
            if self.mask {
                return Err(Error::Grammar(format!("observation step {index} is unmasked")));
            }
            if self.logp_old.is_some() {
                return Err(Error::Grammar(format!(
                    "observation step {index} carries a log-probability"
                )));
            }
        } else if let Some(lp) = self.logp_old {
            if lp.is_nan() || lp > 0.0 {
                return Err(Error::Grammar(format!(
                    "step {index} has log-probability {lp} > 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub question_id: u32,
    pub steps: Vec<Step>,
    pub reward: u8,
    pub turn_count: u32,
}

impl Trajectory {
    /// Builds a trajectory, deriving `turn_count` from the number of THINK runs.
    pub fn new(question_id: u32, steps: Vec<Step>, reward: u8) -> Self {
        let turn_count = count_turns(&steps);
        Trajectory {
            question_id,
            steps,
            reward,
            turn_count,
        }
    }

    pub fn is_tool_using(&self) -> bool {
        self.steps.iter().any(|s| s.segment == Segment::ToolCall)
    }

    pub fn is_correct(&self) -> bool {
        self.reward == 1
    }

    pub fn ends_with_answer(&self) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.segment == Segment::Answer)
    }

    /// Collapses the step sequence into segment runs.
    pub fn runs(&self) -> Vec<(Segment, std::ops::Range<usize>)> {
        segment_runs(&self.steps)
    }

    /// Checks step invariants and the run grammar. Independent of any turn limit.
    pub fn check_grammar(&self) -> Result<()> {
        if self.reward > 1 {
            return Err(Error::Grammar(format!("reward {} is not binary", self.reward)));
        }
        for (i, s) in self.steps.iter().enumerate() {
            s.check(i)?;
        }
        check_run_grammar(&self.steps)?;
        let turns = count_turns(&self.steps);
        if turns != self.turn_count {
            return Err(Error::Grammar(format!(
                "turn_count {} does not match {} THINK runs",
                self.turn_count, turns
            )));
        }
        Ok(())
    }

    /// Full validation against a turn limit.
    pub fn validate(&self, max_turns: u32) -> Result<()> {
        self.check_grammar()?;
        if self.turn_count > max_turns {
            return Err(Error::Grammar(format!(
                "{} turns exceed the limit of {max_turns}",
                self.turn_count
            )));
        }
        if !self.ends_with_answer() && self.turn_count != max_turns {
            return Err(Error::Grammar(
                "trajectory neither answers nor reaches the turn limit".into(),
            ));
        }
        Ok(())
    }

    /// The action ids of the first tool call, excluding the opening marker.
    pub fn first_call_actions(&self) -> Option<Vec<ActionId>> {
        let prefix = first_tool_prefix(self).ok()?;
        Some(
            self.steps[prefix.cut_index + 1..]
                .iter()
                .take_while(|s| s.segment == Segment::ToolCall)
                .map(|s| s.action_id)
                .collect(),
        )
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}[", self.question_id)?;
        for s in &self.steps {
            write!(f, "{}", s.segment.letter())?;
        }
        write!(f, "] r={}", self.reward)
    }
}

fn segment_runs(steps: &[Step]) -> Vec<(Segment, std::ops::Range<usize>)> {
    let mut runs: Vec<(Segment, std::ops::Range<usize>)> = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        match runs.last_mut() {
            Some((seg, range)) if *seg == s.segment => range.end = i + 1,
            _ => runs.push((s.segment, i..i + 1)),
        }
    }
    runs
}

fn count_turns(steps: &[Step]) -> u32 {
    segment_runs(steps)
        .iter()
        .filter(|(seg, _)| *seg == Segment::Think)
        .count() as u32
}

/// Linear scan over runs against `(T C O)* T? A?`.
fn check_run_grammar(steps: &[Step]) -> Result<()> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Start,
        Thought,
        Called,
        Observed,
        Answered,
    }
    let mut state = State::Start;
    for (seg, range) in segment_runs(steps) {
        state = match (state, seg) {
            (State::Start | State::Observed, Segment::Think) => State::Thought,
            (State::Start | State::Observed | State::Thought, Segment::Answer) => State::Answered,
            (State::Thought, Segment::ToolCall) => State::Called,
            (State::Called, Segment::Observation) => State::Observed,
            _ => {
                return Err(Error::Grammar(format!(
                    "unexpected {:?} run at step {}",
                    seg, range.start
                )))
            }
        };
    }
    if state == State::Called {
        return Err(Error::Grammar("tool call without observation".into()));
    }
    Ok(())
}

/// The N rollouts drawn for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub question_id: u32,
    pub rollouts: Vec<Trajectory>,
}

impl Group {
    pub fn new(question_id: u32, rollouts: Vec<Trajectory>) -> Result<Self> {
        if rollouts.is_empty() {
            return Err(Error::EmptyGroup);
        }
        if let Some(t) = rollouts.iter().find(|t| t.question_id != question_id) {
            return Err(Error::Grammar(format!(
                "rollout for question {} in group {question_id}",
                t.question_id
            )));
        }
        Ok(Group {
            question_id,
            rollouts,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn rewards(&self) -> Vec<u8> {
        self.rollouts.iter().map(|t| t.reward).collect()
    }
}

/// Splits a group into (tool-using, no-tool) rollout indices.
pub fn classify_subgroups(group: &Group) -> (Vec<usize>, Vec<usize>) {
    (0..group.len()).partition(|&i| group.rollouts[i].is_tool_using())
}

/// A thinking prefix cut at the first tool-call boundary.
///
/// `steps` holds `source.steps[..=cut_index]`: everything before the first
/// TOOL_CALL run plus its opening marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    pub question_id: u32,
    pub cut_index: usize,
    pub steps: Vec<Step>,
}

impl Prefix {
    /// Index of the first step a continuation samples.
    pub fn continuation_start(&self) -> usize {
        self.cut_index + 1
    }

    pub fn same_tokens(&self, other: &Prefix) -> bool {
        self.question_id == other.question_id
            && self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| a.same_token(b))
    }

    /// Whether `traj` begins with exactly this prefix.
    pub fn is_prefix_of(&self, traj: &Trajectory) -> bool {
        traj.question_id == self.question_id
            && traj.steps.len() > self.cut_index
            && traj.steps[..=self.cut_index] == self.steps[..]
    }
}

pub fn first_tool_prefix(traj: &Trajectory) -> Result<Prefix> {
    let cut_index = traj
        .steps
        .iter()
        .position(|s| s.segment == Segment::ToolCall)
        .ok_or(Error::NotToolUsing {
            question_id: traj.question_id,
        })?;
    Ok(Prefix {
        question_id: traj.question_id,
        cut_index,
        steps: traj.steps[..=cut_index].to_vec(),
    })
}
