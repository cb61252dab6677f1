//! Analytic surrogate gradient against central finite differences.

use rand::Rng;
use serde::Serialize;

use super::train::rollout_step;
use super::RunConfig;
use crate::advantage::{policy_gradient, ratios, surrogate_objective, LossItem, ObjectiveConfig};
use crate::axpo::assemble_step_losses;
use crate::error::Result;
use crate::policy_env::TabularPolicy;
use crate::rng::{self, Purpose};

pub const FD_STEP: f64 = 1e-5;
/// Ratios this close to a clip boundary are excluded.
pub const KINK_BAND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Unclipped,
    UpperClipped,
    LowerClipped,
    KlPenalty,
}

impl Regime {
    const ALL: [Regime; 4] = [Regime::Unclipped, Regime::UpperClipped, Regime::LowerClipped, Regime::KlPenalty];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub index: usize,
    pub regime: Regime,
    pub params_checked: usize,
    pub unmasked_steps: usize,
    /// Steps with a ratio outside the clip range.
    pub clipped_steps: usize,
    /// Steps dropped (with their trajectories) for sitting near a clip kink.
    pub excluded_steps: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_abs: f64,
    pub max_rel: f64,
    pub excluded_steps: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_abs <= tolerance
    }
}

fn near_kink(rho: f64, cfg: &ObjectiveConfig) -> bool {
    (rho - (1.0 - cfg.eps_low)).abs() < KINK_BAND || (rho - (1.0 + cfg.eps_high)).abs() < KINK_BAND
}

/// Pushes the logit of every unmasked action whose advantage has the given sign.
fn push_actions(batch: &[LossItem], policy: &mut TabularPolicy, positive: bool, amount: f64) -> Result<()> {
    let layout = policy.layout;
    for item in batch {
        let ctx = layout.decision_contexts(&item.trajectory)?;
        for t in item.unmasked() {
            let a = item.advantages[t];
            if (positive && a > 0.0) || (!positive && a < 0.0) {
                if let Some(key) = ctx[t] {
                    let action = item.trajectory.steps[t].action_id as usize;
                    policy.node_logits_mut(key)[action] += if positive { amount } else { -amount };
                }
            }
        }
    }
    Ok(())
}

/// Runs `cases` random configurations cycling through the four regimes, each
/// built from one AXPO step of the configured environment.
pub fn gradcheck(cfg: &RunConfig, cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut step_cfg = cfg.clone();
    step_cfg.algorithm = super::Algorithm::Axpo;
    step_cfg.questions_per_step = cfg.questions_per_step.min(4);
    step_cfg.validate()?;
    let params = cfg.env_params()?;
    let env = params.build()?;
    let init = params.initial_policy(&env)?;
    let base_obj = cfg.objective();

    let mut out = Vec::with_capacity(cases);
    for index in 0..cases {
        let regime = Regime::ALL[index % 4];
        let mut rng = rng::stream(seed, Purpose::Probe, &[index as u64]);
        let mut old = init.clone();
        old.logits.iter_mut().for_each(|z| *z += rng.random_range(-0.5..0.5));
        let (groups, results) = rollout_step(&step_cfg, &env, &old, seed, index as u32)?;
        let batch = assemble_step_losses(&groups, &results)?.items;

        let mut policy = old.clone();
        let mut reference = init.clone();
        let mut obj = ObjectiveConfig { beta: 0.0, ..base_obj };
        match regime {
            Regime::Unclipped => {}
            Regime::UpperClipped => push_actions(&batch, &mut policy, true, rng.random_range(0.8..1.5))?,
            Regime::LowerClipped => push_actions(&batch, &mut policy, false, rng.random_range(0.8..1.5))?,
            Regime::KlPenalty => {
                obj.beta = rng.random_range(0.01..0.2);
                policy.logits.iter_mut().for_each(|z| *z += rng.random_range(-0.6..0.6));
                reference.logits.iter_mut().for_each(|z| *z += rng.random_range(-0.6..0.6));
            }
        }

        let mut kept = Vec::with_capacity(batch.len());
        let (mut excluded, mut clipped, mut unmasked) = (0, 0, 0);
        for item in batch {
            let rho = ratios(&item, &policy)?;
            if rho.iter().any(|&r| near_kink(r, &obj)) {
                excluded += rho.len();
                continue;
            }
            clipped += rho
                .iter()
                .filter(|&&r| r < 1.0 - obj.eps_low || r > 1.0 + obj.eps_high)
                .count();
            unmasked += rho.len();
            kept.push(item);
        }

        let analytic = policy_gradient(&kept, &policy, &reference, &obj)?;
        // Only logits of sampled questions can move the objective.
        let mut touched = vec![false; policy.logits.len()];
        for g in &groups {
            for key in policy.layout.question_nodes(g.question_id) {
                touched[policy.layout.node_range(key)].iter_mut().for_each(|t| *t = true);
            }
        }
        let (mut max_abs, mut max_rel, mut checked) = (0.0f64, 0.0f64, 0);
        let mut p = policy.clone();
        for i in 0..p.logits.len() {
            let fd = if touched[i] {
                checked += 1;
                let z = p.logits[i];
                p.logits[i] = z + FD_STEP;
                let up = surrogate_objective(&kept, &p, &reference, &obj)?;
                p.logits[i] = z - FD_STEP;
                let down = surrogate_objective(&kept, &p, &reference, &obj)?;
                p.logits[i] = z;
                (up - down) / (2.0 * FD_STEP)
            } else {
                0.0
            };
            let abs = (analytic[i] - fd).abs();
            max_abs = max_abs.max(abs);
            let scale = analytic[i].abs().max(fd.abs());
            if scale > 1e-6 {
                max_rel = max_rel.max(abs / scale);
            }
        }
        out.push(GradcheckCase {
            index,
            regime,
            params_checked: checked,
            unmasked_steps: unmasked,
            clipped_steps: clipped,
            excluded_steps: excluded,
            max_abs,
            max_rel,
        });
    }
    Ok(GradcheckReport {
        max_abs: out.iter().map(|c| c.max_abs).fold(0.0, f64::max),
        max_rel: out.iter().map(|c| c.max_rel).fold(0.0, f64::max),
        excluded_steps: out.iter().map(|c| c.excluded_steps).sum(),
        cases: out,
    })
}
