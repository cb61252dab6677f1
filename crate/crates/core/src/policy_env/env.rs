//! Synthetic agentic environment.
//!
//! Each question offers a no-tool path that succeeds with `p_think_success`
//! and `m` tool intents, each realizable by `v` call variants. A call yields a
//! useful observation with probability `p_variant_success[intent][variant]`;
//! answering after any useful observation is correct, otherwise the answer
//! falls back to the no-tool success rate. Tool-necessary questions have
//! `p_think_success = 0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::policy::{NodeKey, NodeKind, PolicyLayout, TabularPolicy, NO_TOOL, RETRY};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub tool_necessary: bool,
    pub p_think_success: f64,
    /// `[intent][variant]`
    pub p_variant_success: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_questions: usize,
    pub tool_necessary_fraction: f64,
    pub intents_per_question: usize,
    pub variants_per_intent: usize,
    pub call_steps: usize,
    pub arg_choices: usize,
    pub answer_choices: usize,
    pub max_turns: u32,
    pub seed: u64,
    pub questions: Vec<QuestionSpec>,
}

impl EnvSpec {
    pub fn layout(&self) -> PolicyLayout {
        PolicyLayout {
            num_questions: self.num_questions,
            intents: self.intents_per_question,
            variants: self.variants_per_intent,
            call_steps: self.call_steps,
            arg_choices: self.arg_choices,
            answer_choices: self.answer_choices,
        }
    }

    pub fn question(&self, question_id: u32) -> &QuestionSpec {
        &self.questions[question_id as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_questions == 0 || self.questions.len() != self.num_questions {
            return err(format!(
                "{} question specs for num_questions = {}",
                self.questions.len(),
                self.num_questions
            ));
        }
        if self.intents_per_question == 0 || self.variants_per_intent == 0 {
            return err("intents and variants must be positive".into());
        }
        if self.call_steps == 0 || self.arg_choices == 0 || self.answer_choices == 0 {
            return err("call_steps, arg_choices and answer_choices must be positive".into());
        }
        if self.max_turns == 0 {
            return err("max_turns must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tool_necessary_fraction) {
            return err("tool_necessary_fraction outside [0, 1]".into());
        }
        for (i, q) in self.questions.iter().enumerate() {
            let in_unit = |p: f64| (0.0..=1.0).contains(&p);
            if !in_unit(q.p_think_success)
                || q.p_variant_success.len() != self.intents_per_question
                || q.p_variant_success.iter().any(|row| {
                    row.len() != self.variants_per_intent || row.iter().any(|&p| !in_unit(p))
                })
            {
                return err(format!("question {i} has an invalid probability table"));
            }
            if q.tool_necessary {
                let best = q
                    .p_variant_success
                    .iter()
                    .flatten()
                    .copied()
                    .fold(0.0, f64::max);
                if q.p_think_success != 0.0 || best <= 0.0 {
                    return err(format!("tool-necessary question {i} is unsolvable or solvable without tools"));
                }
            }
        }
        Ok(())
    }
}

/// Generator parameters for a synthetic environment and its starting policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub num_questions: usize,
    pub tool_necessary_fraction: f64,
    pub intents_per_question: usize,
    pub variants_per_intent: usize,
    pub call_steps: usize,
    pub arg_choices: usize,
    pub answer_choices: usize,
    pub max_turns: u32,
    /// Probability that a variant never yields a useful observation.
    pub wrong_variant_mass: f64,
    /// Range for useful-variant success probabilities.
    pub variant_success_range: (f64, f64),
    /// Range for the no-tool success rate of questions that do not need tools.
    pub think_success_range: (f64, f64),
    pub seed: u64,

    // Starting policy.
    /// Mean tool-attempt rate at the open node.
    pub init_tool_rate: f64,
    /// Per-question jitter (std) of the open-node tool logits.
    pub init_open_noise: f64,
    /// Std of the initial variant and argument logits.
    pub init_variant_noise: f64,
    /// Initial logit of RETRY relative to answering, after a miss and after a hit.
    pub init_retry_logit: (f64, f64),
    pub temperature: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams::gap_env()
    }
}

impl EnvParams {
    /// The "gap-env" preset: rare tool use, frequently all-wrong tool subgroups.
    pub fn gap_env() -> Self {
        EnvParams {
            num_questions: 200,
            tool_necessary_fraction: 0.5,
            intents_per_question: 3,
            variants_per_intent: 8,
            call_steps: 1,
            arg_choices: 2,
            answer_choices: 1,
            max_turns: 3,
            wrong_variant_mass: 0.85,
            variant_success_range: (0.5, 1.0),
            think_success_range: (0.4, 0.8),
            seed: 2024,
            init_tool_rate: 0.3,
            init_open_noise: 0.5,
            init_variant_noise: 1.5,
            init_retry_logit: (-1.5, -3.0),
            temperature: 1.0,
        }
    }

    /// A named preset, or a TOML file of parameters when `name` ends in `.toml`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gap-env" => Ok(EnvParams::gap_env()),
            "tiny" => Ok(EnvParams {
                num_questions: 8,
                intents_per_question: 2,
                variants_per_intent: 3,
                wrong_variant_mass: 0.3,
                ..EnvParams::gap_env()
            }),
            path if path.ends_with(".toml") => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))
            }
            other => Err(Error::Config(format!("unknown env preset `{other}`"))),
        }
    }

    pub fn build(&self) -> Result<EnvSpec> {
        let mut rng = rng::stream(self.seed, Purpose::Init, &[0]);
        let n_necessary = (self.tool_necessary_fraction * self.num_questions as f64).round() as usize;
        let (vlo, vhi) = self.variant_success_range;
        let (tlo, thi) = self.think_success_range;
        if vlo < 0.0 || vlo > vhi || vhi > 1.0 || tlo > thi || thi > 1.0 || tlo < 0.0 {
            return Err(Error::Config("invalid success ranges".into()));
        }
        let mut questions = Vec::with_capacity(self.num_questions);
        for i in 0..self.num_questions {
            let tool_necessary = i < n_necessary;
            let p_think_success = if tool_necessary {
                0.0
            } else {
                rng.random_range(tlo..=thi)
            };
            let p_variant_success = loop {
                let table: Vec<Vec<f64>> = (0..self.intents_per_question)
                    .map(|_| {
                        (0..self.variants_per_intent)
                            .map(|_| {
                                if rng.random::<f64>() < self.wrong_variant_mass {
                                    0.0
                                } else {
                                    rng.random_range(vlo..=vhi)
                                }
                            })
                            .collect()
                    })
                    .collect();
                if !tool_necessary || table.iter().flatten().any(|&p| p > 0.0) {
                    break table;
                }
            };
            questions.push(QuestionSpec {
                tool_necessary,
                p_think_success,
                p_variant_success,
            });
        }
        // Interleave necessary and optional questions deterministically.
        let mut order: Vec<usize> = (0..self.num_questions).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let questions = order.into_iter().map(|i| questions[i].clone()).collect();
        let spec = EnvSpec {
            num_questions: self.num_questions,
            tool_necessary_fraction: self.tool_necessary_fraction,
            intents_per_question: self.intents_per_question,
            variants_per_intent: self.variants_per_intent,
            call_steps: self.call_steps,
            arg_choices: self.arg_choices,
            answer_choices: self.answer_choices,
            max_turns: self.max_turns,
            seed: self.seed,
            questions,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The starting (reference) policy for an environment built from these params.
    pub fn initial_policy(&self, env: &EnvSpec) -> Result<TabularPolicy> {
        if !(0.0 < self.init_tool_rate && self.init_tool_rate < 1.0) {
            return Err(Error::Config("init_tool_rate must lie in (0, 1)".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let layout = env.layout();
        let mut policy = TabularPolicy::uniform(layout, self.temperature);
        let mut rng = rng::stream(self.seed, Purpose::Init, &[1]);
        let open_noise = Normal::new(0.0, self.init_open_noise.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        let var_noise = Normal::new(0.0, self.init_variant_noise.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        // m * exp(b) / (1 + m * exp(b)) = rate, in temperature-scaled units.
        let m = layout.intents as f64;
        let bias = (self.init_tool_rate / ((1.0 - self.init_tool_rate) * m)).ln() * self.temperature;
        for q in 0..layout.num_questions as u32 {
            let jitter = open_noise.sample(&mut rng);
            let open = policy.node_logits_mut(NodeKey::new(q, NodeKind::Open));
            open[NO_TOOL as usize] = 0.0;
            for z in open.iter_mut().skip(1) {
                *z = bias + jitter;
            }
            for key in layout.question_nodes(q) {
                match key.kind {
                    NodeKind::Variant { .. } | NodeKind::Arg { .. } => {
                        for z in policy.node_logits_mut(key) {
                            *z = var_noise.sample(&mut rng);
                        }
                    }
                    NodeKind::FollowUp { observation } => {
                        let retry = if observation == 0 {
                            self.init_retry_logit.0
                        } else {
                            self.init_retry_logit.1
                        };
                        policy.node_logits_mut(key)[RETRY as usize] = retry;
                    }
                    NodeKind::Open | NodeKind::Answer => {}
                }
            }
        }
        Ok(policy)
    }
}
