use rand::Rng;

use super::env::EnvSpec;
use super::policy::{NodeKey, NodeKind, TabularPolicy, ANSWER_NOW, NO_TOOL, OBS_HIT, OBS_MISS, RETRY};
use crate::error::{Error, Result};
use crate::trajectory::{ActionId, Prefix, Segment, Step, Trajectory, TOOL_OPEN};

fn draw<R: Rng + ?Sized>(policy: &TabularPolicy, key: NodeKey, rng: &mut R) -> (ActionId, f64) {
    let logp = policy.log_probs(key);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return (i as ActionId, *lp);
        }
    }
    // Rounding left `acc` a hair below one.
    let last = logp.len() - 1;
    (last as ActionId, logp[last])
}

struct Roll<'a, R: Rng + ?Sized> {
    policy: &'a TabularPolicy,
    env: &'a EnvSpec,
    question: u32,
    rng: &'a mut R,
    steps: Vec<Step>,
}

impl<R: Rng + ?Sized> Roll<'_, R> {
    fn decide(&mut self, segment: Segment, kind: NodeKind) -> ActionId {
        let (a, lp) = draw(self.policy, NodeKey::new(self.question, kind), self.rng);
        self.steps.push(Step::decision(segment, a, lp));
        a
    }

    fn answer(&mut self, informed: bool) -> u8 {
        self.decide(Segment::Answer, NodeKind::Answer);
        let p = self.env.question(self.question).p_think_success;
        u8::from(informed || self.rng.random::<f64>() < p)
    }

    /// Samples from just after an opening marker until an answer or the turn limit.
    fn tool_phase(&mut self, intent: usize) -> u8 {
        let mut turn = 1;
        let mut informed = false;
        loop {
            let variant = self.decide(Segment::ToolCall, NodeKind::Variant { intent }) as usize;
            for position in 0..self.env.call_steps - 1 {
                self.decide(
                    Segment::ToolCall,
                    NodeKind::Arg {
                        intent,
                        variant,
                        position,
                    },
                );
            }
            let p = self.env.question(self.question).p_variant_success[intent][variant];
            let hit = self.rng.random::<f64>() < p;
            informed |= hit;
            self.steps
                .push(Step::observation(if hit { OBS_HIT } else { OBS_MISS }));
            if turn == self.env.max_turns {
                return 0;
            }
            let observation = usize::from(hit);
            turn += 1;
            if self.decide(Segment::Think, NodeKind::FollowUp { observation }) == ANSWER_NOW {
                return self.answer(informed);
            }
            self.steps.push(Step::tool_open());
        }
    }

    fn finish(self, reward: u8) -> Trajectory {
        Trajectory::new(self.question, self.steps, reward)
    }
}

/// Samples one full rollout for `question_id` from `policy`.
pub fn sample_rollout<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    env: &EnvSpec,
    question_id: u32,
    rng: &mut R,
) -> Trajectory {
    let mut roll = Roll {
        policy,
        env,
        question: question_id,
        rng,
        steps: Vec::with_capacity(8),
    };
    let choice = roll.decide(Segment::Think, NodeKind::Open);
    let reward = if choice == NO_TOOL {
        roll.answer(false)
    } else {
        roll.steps.push(Step::tool_open());
        roll.tool_phase(choice as usize - 1)
    };
    roll.finish(reward)
}

/// Intent committed to by a first-tool-call prefix, checking that the prefix is
/// exactly `[THINK(intent), TOOL_OPEN]` for this environment.
pub fn prefix_intent(env: &EnvSpec, prefix: &Prefix) -> Result<usize> {
    let invalid = |m: &str| Err(Error::InvalidPrefix(m.to_string()));
    if prefix.question_id as usize >= env.num_questions {
        return invalid("question outside the environment");
    }
    if prefix.steps.len() != prefix.cut_index + 1 {
        return invalid("step count does not match cut index");
    }
    let marker = &prefix.steps[prefix.cut_index];
    if marker.segment != Segment::ToolCall || marker.action_id != TOOL_OPEN {
        return invalid("cut does not sit at a tool-call opening");
    }
    if prefix.cut_index != 1 {
        return invalid("not the first tool-call boundary");
    }
    let think = &prefix.steps[0];
    if think.segment != Segment::Think
        || think.action_id == NO_TOOL
        || think.action_id as usize > env.intents_per_question
    {
        return invalid("prefix thought does not commit to a tool intent");
    }
    Ok(think.action_id as usize - 1)
}

/// Draws a continuation that shares `prefix` exactly and resumes inside the tool call.
pub fn sample_continuation<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    env: &EnvSpec,
    prefix: &Prefix,
    rng: &mut R,
) -> Result<Trajectory> {
    let intent = prefix_intent(env, prefix)?;
    let mut roll = Roll {
        policy,
        env,
        question: prefix.question_id,
        rng,
        steps: prefix.steps.clone(),
    };
    let reward = roll.tool_phase(intent);
    Ok(roll.finish(reward))
}

/// Exact path-sum probabilities for one question under `policy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeProbs {
    /// `q`: probability of committing to a tool call.
    pub tool_rate: f64,
    /// Probability that a rollout is tool-using and correct (`q * p_tool`).
    pub correct_and_tool: f64,
    pub correct: f64,
}

impl OutcomeProbs {
    /// `p_tool`, absent when the policy never calls a tool.
    pub fn p_tool(&self) -> Option<f64> {
        (self.tool_rate > 0.0).then(|| self.correct_and_tool / self.tool_rate)
    }
}

fn tool_phase_success(
    policy: &TabularPolicy,
    env: &EnvSpec,
    q: u32,
    intent: usize,
    turn: u32,
    informed: bool,
) -> f64 {
    let spec = env.question(q);
    let variants = policy.probs(NodeKey::new(q, NodeKind::Variant { intent }));
    variants
        .iter()
        .enumerate()
        .map(|(v, &pv)| {
            let hit = spec.p_variant_success[intent][v];
            let after = |obs: usize, informed: bool| -> f64 {
                if turn == env.max_turns {
                    return 0.0;
                }
                let follow = policy.probs(NodeKey::new(q, NodeKind::FollowUp { observation: obs }));
                let answer = if informed { 1.0 } else { spec.p_think_success };
                follow[ANSWER_NOW as usize] * answer
                    + follow[RETRY as usize]
                        * tool_phase_success(policy, env, q, intent, turn + 1, informed)
            };
            pv * (hit * after(1, true) + (1.0 - hit) * after(0, informed))
        })
        .sum()
}

/// Exact probability that a continuation from an `intent` prefix is correct.
pub fn exact_prefix_success(policy: &TabularPolicy, env: &EnvSpec, question: u32, intent: usize) -> f64 {
    tool_phase_success(policy, env, question, intent, 1, false)
}

pub fn exact_outcomes(policy: &TabularPolicy, env: &EnvSpec, question: u32) -> OutcomeProbs {
    let open = policy.probs(NodeKey::new(question, NodeKind::Open));
    let correct_and_tool: f64 = (0..env.intents_per_question)
        .map(|i| open[i + 1] * exact_prefix_success(policy, env, question, i))
        .sum();
    let no_tool = open[NO_TOOL as usize];
    OutcomeProbs {
        tool_rate: 1.0 - no_tool,
        correct_and_tool,
        correct: correct_and_tool + no_tool * env.question(question).p_think_success,
    }
}
