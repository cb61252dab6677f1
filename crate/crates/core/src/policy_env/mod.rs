//! Synthetic agentic environment and the tabular policy trained on it.

mod env;
mod policy;
mod sampler;

pub use env::{EnvParams, EnvSpec, QuestionSpec};
pub use policy::{
    exact_kl, log_softmax, softmax, NodeKey, NodeKind, PolicyLayout, TabularPolicy, ANSWER_NOW,
    NO_TOOL, OBS_HIT, OBS_MISS, RETRY,
};
pub(crate) use policy::kl_from_log_probs;
pub use sampler::{
    exact_outcomes, exact_prefix_success, prefix_intent, sample_continuation, sample_rollout,
    OutcomeProbs,
};

use crate::error::{Error, Result};
use crate::trajectory::{Prefix, Segment, Trajectory};

/// Tool-attempt rate, per-tool-rollout success and per-prefix success.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageParams {
    pub q: f64,
    pub p_tool: f64,
    pub p_prefix: f64,
    pub n: u32,
}

impl CoverageParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("q", self.q), ("p_tool", self.p_tool), ("p_prefix", self.p_prefix)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.n == 0 {
            return Err(Error::Domain("N must be positive".into()));
        }
        Ok(())
    }
}

/// Mean rollout-policy probability over the first tool call's steps after the
/// opening marker.
pub fn confidence(traj: &Trajectory, prefix: &Prefix) -> Result<f64> {
    if !traj.is_tool_using() {
        return Err(Error::NotToolUsing {
            question_id: traj.question_id,
        });
    }
    let call = traj.steps[prefix.continuation_start()..]
        .iter()
        .enumerate()
        .take_while(|(_, s)| s.segment == Segment::ToolCall);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, s) in call {
        let lp = s.logp_old.ok_or(Error::MissingLogProb {
            question_id: traj.question_id,
            step: prefix.continuation_start() + i,
        })?;
        sum += lp.exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidPrefix("tool call has no steps after its opening".into()));
    }
    Ok(sum / n as f64)
}
