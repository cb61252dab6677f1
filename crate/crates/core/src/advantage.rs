//! Group-normalized advantages and the clipped surrogate with a KL penalty.
//!
//! For a batch of loss items the objective is
//!
//! ```text
//! J(θ) = Σ_items  mean_{unmasked t} [ min(ρ_t A_t, clip(ρ_t, 1-ε_low, 1+ε_high) A_t) - β KL_t ]
//! ρ_t  = π_θ(a_t | node_t) / exp(logp_old_t)
//! KL_t = KL(π_θ(.|node_t) || π_ref(.|node_t))
//! ```
//!
//! and is maximized by gradient ascent on the tabular logits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy_env::{kl_from_log_probs, NodeKey, TabularPolicy};
use crate::trajectory::Trajectory;

/// `(r_i - mean) / std` with population std; all zeros when std is exactly 0.
pub fn grpo_advantage(rewards: &[u8]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards
        .iter()
        .map(|&r| (r as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r as f64 - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub epochs_per_batch: u32,
    pub learning_rate: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            eps_low: 0.2,
            eps_high: 0.4,
            beta: 1e-3,
            epochs_per_batch: 1,
            learning_rate: 0.2,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return Err(Error::Config("clip ranges must be positive".into()));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `min(ρA, clip(ρ, 1-ε_low, 1+ε_high) A)`.
pub fn clipped_term(rho: f64, advantage: f64, cfg: &ObjectiveConfig) -> f64 {
    let clipped = rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    (rho * advantage).min(clipped * advantage)
}

/// Where a loss item's advantage came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Group-normalized advantage of a standard rollout.
    Standard,
    /// Per-prefix advantage of a resampled continuation.
    Continuation,
    /// Recovery-substituted advantage on a source rollout's prefix.
    PrefixCredit,
}

/// One trajectory's contribution to the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem {
    pub trajectory: Arc<Trajectory>,
    /// Per-step advantage; only read where `mask` is set.
    pub advantages: Vec<f64>,
    /// Effective loss mask.
    pub mask: Vec<bool>,
    pub provenance: Provenance,
}

impl LossItem {
    /// Broadcasts one advantage to every trainable step.
    pub fn broadcast(trajectory: Arc<Trajectory>, advantage: f64, provenance: Provenance) -> Self {
        let mask = trajectory.steps.iter().map(|s| s.mask).collect();
        LossItem {
            advantages: vec![advantage; trajectory.steps.len()],
            mask,
            trajectory,
            provenance,
        }
    }

    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }
}

struct StepTerm {
    key: NodeKey,
    action: usize,
    logp_old: f64,
    advantage: f64,
}

fn step_terms(item: &LossItem, policy: &TabularPolicy) -> Result<Vec<StepTerm>> {
    let traj = &item.trajectory;
    if item.mask.len() != traj.steps.len() || item.advantages.len() != traj.steps.len() {
        return Err(Error::Grammar("loss item arrays do not match its trajectory".into()));
    }
    let contexts = policy.layout.decision_contexts(traj)?;
    item.unmasked()
        .map(|i| {
            let key = contexts[i]
                .ok_or_else(|| Error::Grammar(format!("unmasked step {i} has no decision node")))?;
            let logp_old = traj.steps[i].logp_old.ok_or(Error::MissingLogProb {
                question_id: traj.question_id,
                step: i,
            })?;
            Ok(StepTerm {
                key,
                action: traj.steps[i].action_id as usize,
                logp_old,
                advantage: item.advantages[i],
            })
        })
        .collect()
}

/// Importance ratios of every unmasked step, in order.
pub fn ratios(item: &LossItem, policy: &TabularPolicy) -> Result<Vec<f64>> {
    Ok(step_terms(item, policy)?
        .iter()
        .map(|t| (policy.log_prob(t.key, t.action as u16) - t.logp_old).exp())
        .collect())
}

pub fn surrogate_objective(
    batch: &[LossItem],
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for item in batch {
        let terms = step_terms(item, policy)?;
        if terms.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for t in &terms {
            let logp = policy.log_probs(t.key);
            let rho = (logp[t.action] - t.logp_old).exp();
            let mut v = clipped_term(rho, t.advantage, cfg);
            if cfg.beta != 0.0 {
                v -= cfg.beta * kl_from_log_probs(&logp, &reference.log_probs(t.key));
            }
            sum += v;
        }
        total += sum / terms.len() as f64;
    }
    Ok(total)
}

/// Analytic gradient of [`surrogate_objective`] with respect to every logit.
pub fn policy_gradient(
    batch: &[LossItem],
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.logits.len()];
    let inv_t = 1.0 / policy.temperature;
    for item in batch {
        let terms = step_terms(item, policy)?;
        if terms.is_empty() {
            continue;
        }
        let scale = 1.0 / terms.len() as f64;
        for t in &terms {
            let range = policy.layout.node_range(t.key);
            let logp = policy.log_probs(t.key);
            let rho = (logp[t.action] - t.logp_old).exp();
            let a = t.advantage;
            let clipped = rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
            // d(ρA)/dz_j = A ρ (δ_ja - π_j) / T while the unclipped branch is the min.
            if rho * a <= clipped * a {
                let w = scale * a * rho * inv_t;
                for (j, g) in grad[range.clone()].iter_mut().enumerate() {
                    let indicator = if j == t.action { 1.0 } else { 0.0 };
                    *g += w * (indicator - logp[j].exp());
                }
            }
            if cfg.beta != 0.0 {
                // dKL/dz_j = π_j [(log π_j - log r_j) - KL] / T
                let logr = reference.log_probs(t.key);
                let kl: f64 = logp
                    .iter()
                    .zip(&logr)
                    .map(|(&lp, &lr)| lp.exp() * (lp - lr))
                    .sum();
                let w = scale * cfg.beta * inv_t;
                for (j, g) in grad[range].iter_mut().enumerate() {
                    *g -= w * logp[j].exp() * ((logp[j] - logr[j]) - kl);
                }
            }
        }
    }
    Ok(grad)
}

/// Gradient-ascent step on the logits.
pub fn apply_update(policy: &mut TabularPolicy, gradient: &[f64], learning_rate: f64) {
    assert_eq!(
        gradient.len(),
        policy.logits.len(),
        "gradient shape does not match the policy"
    );
    for (z, g) in policy.logits.iter_mut().zip(gradient) {
        *z += learning_rate * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy_env::{EnvParams, NodeKind};
    use crate::rng::{self, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_advantage(&[1, 1, 1, 1]).unwrap(), vec![0.0; 4]);
        let a = grpo_advantage(&[1, 0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12 && (a[1] + 1.0).abs() < 1e-12);
        let a = grpo_advantage(&[1, 0, 0, 0]).unwrap();
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
        assert!(matches!(grpo_advantage(&[]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn clipped_examples() {
        let cfg = ObjectiveConfig::default();
        assert_eq!(clipped_term(1.0, 0.5, &cfg), 0.5);
        assert!((clipped_term(2.0, 1.0, &cfg) - 1.4).abs() < 1e-12);
        assert!((clipped_term(0.5, -1.0, &cfg) + 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn advantages_are_centered(r in prop::collection::vec(0u8..=1, 1..32)) {
            let a = grpo_advantage(&r).unwrap();
            if r.iter().all(|&x| x == r[0]) {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            } else {
                prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            }
        }

        #[test]
        fn clipped_term_is_bounded_and_monotone(rho in 0.01f64..5.0, a in -3.0f64..3.0, da in 0.0f64..2.0) {
            let cfg = ObjectiveConfig::default();
            prop_assert!(clipped_term(rho, a, &cfg) <= rho * a + 1e-12);
            prop_assert!(clipped_term(rho, a + da, &cfg) >= clipped_term(rho, a, &cfg) - 1e-12);
        }
    }

    fn setup(seed: u64) -> (crate::policy_env::EnvSpec, TabularPolicy) {
        let mut params = EnvParams::preset("tiny").unwrap();
        params.call_steps = 2;
        params.init_tool_rate = 0.6;
        params.init_retry_logit = (0.3, -0.5);
        params.answer_choices = 2;
        params.seed = seed;
        let env = params.build().unwrap();
        let policy = params.initial_policy(&env).unwrap();
        (env, policy)
    }

    fn random_batch(seed: u64, env: &crate::policy_env::EnvSpec, old: &TabularPolicy) -> Vec<LossItem> {
        let mut rng = rng::stream(seed, Purpose::Rollout, &[]);
        (0..12)
            .map(|i| {
                let t = crate::policy_env::sample_rollout(old, env, i % 8, &mut rng);
                let a = rng.random_range(-2.0..2.0);
                LossItem::broadcast(Arc::new(t), a, Provenance::Standard)
            })
            .collect()
    }

    /// Σ_items mean_t A_t ∇ log π(a_t), written independently of the clip logic.
    fn score_function_gradient(batch: &[LossItem], policy: &TabularPolicy) -> Vec<f64> {
        let mut g = vec![0.0; policy.logits.len()];
        for item in batch {
            let ctx = policy.layout.decision_contexts(&item.trajectory).unwrap();
            let idx: Vec<usize> = item.unmasked().collect();
            for &i in &idx {
                let key = ctx[i].unwrap();
                let p = policy.probs(key);
                let a = item.trajectory.steps[i].action_id as usize;
                for (j, slot) in policy.layout.node_range(key).enumerate() {
                    let d = if j == a { 1.0 } else { 0.0 } - p[j];
                    g[slot] += item.advantages[i] * d / policy.temperature / idx.len() as f64;
                }
            }
        }
        g
    }

    #[test]
    fn on_policy_gradient_is_score_function() {
        for seed in 0..5 {
            let (env, policy) = setup(seed);
            let batch = random_batch(seed, &env, &policy);
            let cfg = ObjectiveConfig {
                beta: 0.0,
                ..Default::default()
            };
            let g = policy_gradient(&batch, &policy, &policy, &cfg).unwrap();
            let s = score_function_gradient(&batch, &policy);
            for (x, y) in g.iter().zip(&s) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_advantage_and_beta_gives_zero_gradient() {
        let (env, policy) = setup(1);
        let mut batch = random_batch(1, &env, &policy);
        batch.iter_mut().for_each(|b| b.advantages.fill(0.0));
        let cfg = ObjectiveConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(policy_gradient(&batch, &policy, &policy, &cfg)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        assert_eq!(surrogate_objective(&batch, &policy, &policy, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let (env, policy) = setup(2);
        let batch = random_batch(2, &env, &policy);
        let cfg = ObjectiveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let expected: f64 = batch.iter().map(|b| b.advantages[0]).sum();
        let got = surrogate_objective(&batch, &policy, &policy, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn two_step_table_evaluation() {
        // Steps at ρ = 1.0 and ρ = 2.0 with A = 1: (1.0 + 1.4) / 2.
        let (env, policy) = setup(3);
        let mut rng = rng::stream(3, Purpose::Rollout, &[]);
        let t = std::iter::repeat_with(|| crate::policy_env::sample_rollout(&policy, &env, 0, &mut rng))
            .find(|t| t.is_tool_using())
            .unwrap();
        let mut t = t;
        let idx: Vec<usize> = t.steps.iter().enumerate().filter(|(_, s)| s.mask).map(|(i, _)| i).collect();
        let (i0, i1) = (idx[0], idx[1]);
        t.steps[i1].logp_old = Some(t.steps[i1].logp_old.unwrap() - 2f64.ln());
        let mut item = LossItem::broadcast(Arc::new(t), 1.0, Provenance::Standard);
        item.mask.iter_mut().enumerate().for_each(|(i, m)| *m = i == i0 || i == i1);
        let cfg = ObjectiveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let r = ratios(&item, &policy).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12);
        let j = surrogate_objective(&[item], &policy, &policy, &cfg).unwrap();
        assert!((j - 1.2).abs() < 1e-12);
    }

    #[test]
    fn missing_logprob_is_reported() {
        let (env, policy) = setup(4);
        let mut batch = random_batch(4, &env, &policy);
        let mut t = (*batch[0].trajectory).clone();
        t.steps[0].logp_old = None;
        batch[0].trajectory = Arc::new(t);
        assert!(matches!(
            surrogate_objective(&batch, &policy, &policy, &ObjectiveConfig::default()),
            Err(Error::MissingLogProb { step: 0, .. })
        ));
    }

    #[test]
    fn update_edge_cases() {
        let (_, policy) = setup(5);
        let mut p = policy.clone();
        let n = p.logits.len();
        apply_update(&mut p, &vec![0.0; n], 1.0);
        assert_eq!(p, policy);
        apply_update(&mut p, &vec![1.0; n], 0.0);
        assert_eq!(p, policy);
        let key = NodeKey::new(0, NodeKind::Open);
        let before = p.probs(key)[1];
        let mut g = vec![0.0; p.logits.len()];
        g[p.layout.node_range(key).start + 1] = 0.5;
        apply_update(&mut p, &g, 0.1);
        assert!(p.probs(key)[1] > before);
        assert!((p.probs(key).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Central finite differences over every logit.
    fn finite_difference(
        batch: &[LossItem],
        policy: &TabularPolicy,
        reference: &TabularPolicy,
        cfg: &ObjectiveConfig,
    ) -> Vec<f64> {
        let h = 1e-5;
        let mut p = policy.clone();
        (0..policy.logits.len())
            .map(|i| {
                let z = p.logits[i];
                p.logits[i] = z + h;
                let up = surrogate_objective(batch, &p, reference, cfg).unwrap();
                p.logits[i] = z - h;
                let down = surrogate_objective(batch, &p, reference, cfg).unwrap();
                p.logits[i] = z;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences_off_policy() {
        let mut rng = rng::stream(77, Purpose::Init, &[]);
        for seed in 0..4 {
            let (env, old) = setup(seed);
            let batch = random_batch(seed, &env, &old);
            let mut policy = old.clone();
            policy.logits.iter_mut().for_each(|z| *z += rng.random_range(-0.8..0.8));
            let mut reference = old.clone();
            reference.logits.iter_mut().for_each(|z| *z += rng.random_range(-0.5..0.5));
            let cfg = ObjectiveConfig {
                beta: 0.05,
                ..Default::default()
            };
            // Skip configurations with a ratio sitting on a clip kink.
            let near_kink = batch.iter().any(|b| {
                ratios(b, &policy).unwrap().iter().any(|r| {
                    (r - (1.0 - cfg.eps_low)).abs() < 1e-4 || (r - (1.0 + cfg.eps_high)).abs() < 1e-4
                })
            });
            if near_kink {
                continue;
            }
            let g = policy_gradient(&batch, &policy, &reference, &cfg).unwrap();
            let fd = finite_difference(&batch, &policy, &reference, &cfg);
            let dev = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-6, "seed {seed}: {dev}");
        }
    }
}
