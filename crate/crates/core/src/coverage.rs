//! Coverage of a fixed sampling budget: the probability that `N` draws yield at
//! least one correct tool-using rollout, under raw sampling and under
//! resampling from a committed tool-call prefix.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy_env::{
    exact_outcomes, exact_prefix_success, prefix_intent, sample_continuation, sample_rollout, CoverageParams,
    EnvSpec, OutcomeProbs, TabularPolicy,
};
use crate::rng::{self, Purpose};
use crate::trajectory::first_tool_prefix;

const MC_CHUNK: u64 = 8192;

fn check_unit(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {p} outside [0, 1]")))
    }
}

fn check_n(n: u32) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("N must be positive".into()));
    }
    Ok(())
}

fn at_least_one(p: f64, n: u32) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

/// `1 - (1 - q * p_tool)^N`
pub fn coverage_raw(q: f64, p_tool: f64, n: u32) -> Result<f64> {
    check_unit("q", q)?;
    check_unit("p_tool", p_tool)?;
    check_n(n)?;
    Ok(at_least_one(q * p_tool, n))
}

/// `1 - (1 - p_prefix)^N`
pub fn coverage_resample(p_prefix: f64, n: u32) -> Result<f64> {
    check_unit("p_prefix", p_prefix)?;
    check_n(n)?;
    Ok(at_least_one(p_prefix, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dominance {
    /// `p_prefix >= q * p_tool` and resampling coverage is at least raw coverage.
    pub holds: bool,
    /// Resample coverage minus raw coverage.
    pub margin: f64,
}

pub fn dominance_check(params: &CoverageParams) -> Dominance {
    // Difference of miss probabilities; avoids both terms rounding to 1.
    let n = params.n as i32;
    let margin = (1.0 - params.q * params.p_tool).powi(n) - (1.0 - params.p_prefix).powi(n);
    Dominance {
        holds: params.p_prefix >= params.q * params.p_tool && margin >= 0.0,
        margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub raw: f64,
    pub resample: f64,
    /// Binomial standard errors at the closed-form values.
    pub raw_se: f64,
    pub resample_se: f64,
}

impl McEstimate {
    /// Whether both estimates lie within `k` standard errors of the closed form.
    pub fn within(&self, params: &CoverageParams, k: f64) -> bool {
        let raw = at_least_one(params.q * params.p_tool, params.n);
        let res = at_least_one(params.p_prefix, params.n);
        (self.raw - raw).abs() <= k * self.raw_se && (self.resample - res).abs() <= k * self.resample_se
    }
}

/// Simulates both sampling schemes. Trials run in fixed-size chunks with one
/// RNG stream per chunk, so the result does not depend on the thread count.
pub fn monte_carlo_coverage(params: &CoverageParams, trials: u64, seed: u64) -> Result<McEstimate> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::Domain("trials must be positive".into()));
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let (raw_hits, res_hits) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, Purpose::MonteCarlo, &[c]);
            let len = MC_CHUNK.min(trials - c * MC_CHUNK);
            let (mut raw, mut res) = (0u64, 0u64);
            for _ in 0..len {
                let raw_ok = (0..params.n).any(|_| {
                    let tool = rng.random::<f64>() < params.q;
                    let ok = rng.random::<f64>() < params.p_tool;
                    tool && ok
                });
                let res_ok = (0..params.n).any(|_| rng.random::<f64>() < params.p_prefix);
                raw += u64::from(raw_ok);
                res += u64::from(res_ok);
            }
            (raw, res)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let t = trials as f64;
    let se = |p: f64| (p * (1.0 - p) / t).sqrt();
    Ok(McEstimate {
        raw: raw_hits as f64 / t,
        resample: res_hits as f64 / t,
        raw_se: se(at_least_one(params.q * params.p_tool, params.n)),
        resample_se: se(at_least_one(params.p_prefix, params.n)),
    })
}

/// Success statistics of one committed tool-call prefix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixStat {
    pub intent: usize,
    /// Share of tool-using rollouts that committed to this prefix.
    pub share: f64,
    /// Empirical continuation success rate.
    pub p_prefix: f64,
    pub exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub question_id: u32,
    pub trials: u64,
    pub q: f64,
    /// Absent when no rollout used a tool.
    pub p_tool: Option<f64>,
    pub prefixes: Vec<PrefixStat>,
    /// Share-weighted mean of the empirical prefix success rates.
    pub mean_p_prefix: Option<f64>,
    /// Whether `mean_p_prefix` matches `p_tool` within 3 combined standard errors.
    pub consistent: Option<bool>,
    #[serde(skip)]
    pub exact: OutcomeProbs,
}

impl ProbeReport {
    /// `E[p(t_1)] - q * p_tool`.
    pub fn threshold_margin(&self) -> Option<f64> {
        Some(self.mean_p_prefix? - self.q * self.p_tool?)
    }
}

/// Estimates `q`, `p_tool` and the distribution of prefix success rates for one
/// question from live rollouts; each committed prefix gets `trials` fresh
/// continuations.
pub fn env_coverage_probe(
    env: &EnvSpec,
    policy: &TabularPolicy,
    question_id: u32,
    trials: u64,
    seed: u64,
) -> Result<ProbeReport> {
    if question_id as usize >= env.num_questions {
        return Err(Error::Domain(format!("question {question_id} not in environment")));
    }
    if trials == 0 {
        return Err(Error::Domain("trials must be positive".into()));
    }
    let m = env.intents_per_question;
    let mut committed = vec![0u64; m];
    let mut prefixes = vec![None; m];
    let (mut tool, mut tool_correct) = (0u64, 0u64);
    let mut rng = rng::stream(seed, Purpose::Probe, &[question_id as u64, 0]);
    for _ in 0..trials {
        let t = sample_rollout(policy, env, question_id, &mut rng);
        if !t.is_tool_using() {
            continue;
        }
        tool += 1;
        tool_correct += u64::from(t.reward);
        let prefix = first_tool_prefix(&t)?;
        let intent = prefix_intent(env, &prefix)?;
        committed[intent] += 1;
        prefixes[intent].get_or_insert(prefix);
    }
    let mut stats = Vec::new();
    for (intent, prefix) in prefixes.into_iter().enumerate() {
        let Some(prefix) = prefix else { continue };
        let mut rng = rng::stream(seed, Purpose::Probe, &[question_id as u64, 1 + intent as u64]);
        let mut ok = 0u64;
        for _ in 0..trials {
            ok += u64::from(sample_continuation(policy, env, &prefix, &mut rng)?.reward);
        }
        stats.push(PrefixStat {
            intent,
            share: committed[intent] as f64 / tool as f64,
            p_prefix: ok as f64 / trials as f64,
            exact: exact_prefix_success(policy, env, question_id, intent),
        });
    }
    let q = tool as f64 / trials as f64;
    let p_tool = (tool > 0).then(|| tool_correct as f64 / tool as f64);
    let mean_p_prefix = (tool > 0).then(|| stats.iter().map(|s| s.share * s.p_prefix).sum::<f64>());
    let consistent = p_tool.zip(mean_p_prefix).map(|(pt, mean)| {
        let se_tool = pt * (1.0 - pt) / tool as f64;
        let se_mean: f64 = stats
            .iter()
            .map(|s| s.share * s.share * s.p_prefix * (1.0 - s.p_prefix) / trials as f64)
            .sum();
        // Both variances vanish for deterministic outcomes.
        (mean - pt).abs() <= 3.0 * (se_tool + se_mean).sqrt() + 1e-12
    });
    Ok(ProbeReport {
        question_id,
        trials,
        q,
        p_tool,
        prefixes: stats,
        mean_p_prefix,
        consistent,
        exact: exact_outcomes(policy, env, question_id),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub q: f64,
    pub p_tool: f64,
    pub p_prefix: f64,
    pub n: u32,
    pub raw_cf: f64,
    pub res_cf: f64,
    pub raw_mc: f64,
    pub res_mc: f64,
    pub margin: f64,
}

pub const SWEEP_HEADER: &str = "q,p_tool,p_prefix,N,raw_cf,res_cf,raw_mc,res_mc,margin";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.q, self.p_tool, self.p_prefix, self.n, self.raw_cf, self.res_cf, self.raw_mc, self.res_mc, self.margin
        )
    }
}

/// Every combination of the given grids, closed form beside Monte Carlo.
pub fn coverage_sweep(
    qs: &[f64],
    p_tools: &[f64],
    p_prefixes: &[f64],
    ns: &[u32],
    trials: u64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &q in qs {
        for &p_tool in p_tools {
            for &p_prefix in p_prefixes {
                for &n in ns {
                    let params = CoverageParams { q, p_tool, p_prefix, n };
                    let mc = monte_carlo_coverage(&params, trials, rng::stream_seed(seed, Purpose::MonteCarlo, &[rows.len() as u64]))?;
                    rows.push(SweepRow {
                        q,
                        p_tool,
                        p_prefix,
                        n,
                        raw_cf: coverage_raw(q, p_tool, n)?,
                        res_cf: coverage_resample(p_prefix, n)?,
                        raw_mc: mc.raw,
                        res_mc: mc.resample,
                        margin: dominance_check(&params).margin,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{SWEEP_HEADER}")?;
        for r in rows {
            writeln!(out, "{}", r.csv())?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
