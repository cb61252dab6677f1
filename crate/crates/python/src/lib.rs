//! Python bindings: advantages, clipping, coverage, the synthetic environment,
//! trigger detection and ranking, diagnostics and the training harness.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use axpo_core::advantage::ObjectiveConfig;
use axpo_core::harness::{self, RunConfig};
use axpo_core::policy_env::{self, CoverageParams, EnvParams, EnvSpec, TabularPolicy};
use axpo_core::rng::{self, Purpose};
use axpo_core::trajectory::{self as traj, first_tool_prefix};
use axpo_core::{axpo as core_axpo, coverage, diagnostics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::MissingRun(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait Raise<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> Raise<T> for axpo_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Group-relative advantages of binary rewards (population std, zero when flat).
#[pyfunction]
fn grpo_advantage(rewards: Vec<u8>) -> PyResult<Vec<f64>> {
    axpo_core::advantage::grpo_advantage(&rewards).py()
}

/// Advantages of the K continuations of one prefix.
#[pyfunction]
fn continuation_advantages(rewards: Vec<u8>) -> PyResult<Vec<f64>> {
    core_axpo::continuation_advantages(&rewards).py()
}

/// 1 when any continuation is correct.
#[pyfunction]
fn recovery_indicator(rewards: Vec<u8>) -> PyResult<u8> {
    if rewards.is_empty() {
        return Err(PyValueError::new_err("no continuation rewards"));
    }
    Ok(core_axpo::recovery_indicator(&rewards))
}

/// Advantage of the source rollout after substituting its reward with `recovery`.
#[pyfunction]
fn prefix_advantage(group_rewards: Vec<u8>, source_index: usize, recovery: u8) -> PyResult<f64> {
    core_axpo::prefix_advantage(&group_rewards, source_index, recovery).py()
}

/// `min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)`
#[pyfunction]
#[pyo3(signature = (ratio, advantage, eps_low = 0.2, eps_high = 0.4))]
fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let cfg = ObjectiveConfig { eps_low, eps_high, ..Default::default() };
    axpo_core::advantage::clipped_term(ratio, advantage, &cfg)
}

/// Maximum number of extra continuations per step.
#[pyfunction]
fn budget_cap(ratio: f64, questions: usize, group_size: usize) -> usize {
    core_axpo::budget_cap(ratio, questions, group_size)
}

#[pyfunction]
fn coverage_raw(q: f64, p_tool: f64, n: u32) -> PyResult<f64> {
    coverage::coverage_raw(q, p_tool, n).py()
}

#[pyfunction]
fn coverage_resample(p_prefix: f64, n: u32) -> PyResult<f64> {
    coverage::coverage_resample(p_prefix, n).py()
}

/// Returns `(holds, margin)`.
#[pyfunction]
fn dominance_check(q: f64, p_tool: f64, p_prefix: f64, n: u32) -> (bool, f64) {
    let d = coverage::dominance_check(&CoverageParams { q, p_tool, p_prefix, n });
    (d.holds, d.margin)
}

/// Monte Carlo coverage under raw sampling and prefix resampling.
#[pyfunction]
#[pyo3(signature = (q, p_tool, p_prefix, n, trials = 100_000, seed = 0))]
fn monte_carlo_coverage<'py>(
    py: Python<'py>,
    q: f64,
    p_tool: f64,
    p_prefix: f64,
    n: u32,
    trials: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let params = CoverageParams { q, p_tool, p_prefix, n };
    let mc = py.detach(|| coverage::monte_carlo_coverage(&params, trials, seed)).py()?;
    let out = PyDict::new(py);
    out.set_item("raw", mc.raw)?;
    out.set_item("resample", mc.resample)?;
    out.set_item("raw_se", mc.raw_se)?;
    out.set_item("resample_se", mc.resample_se)?;
    out.set_item("within_3se", mc.within(&params, 3.0))?;
    Ok(out)
}

/// pass@k over `{question_id: [rewards]}`; pass@1 is the mean over all rollouts.
#[pyfunction]
fn pass_at_k(rewards: BTreeMap<u32, Vec<u8>>, k: usize) -> PyResult<f64> {
    diagnostics::pass_at_k(&rewards, k).py()
}

/// Number of distinct tool-call action sequences.
#[pyfunction]
fn cluster_count(calls: Vec<Vec<u16>>) -> usize {
    diagnostics::cluster_count(&calls)
}

/// Tabular softmax policy over the environment's decision nodes.
#[pyclass(module = "axpo", skip_from_py_object)]
#[derive(Clone)]
struct Policy {
    inner: TabularPolicy,
}

#[pymethods]
impl Policy {
    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits.clone()
    }

    #[setter]
    fn set_logits(&mut self, logits: Vec<f64>) -> PyResult<()> {
        if logits.len() != self.inner.logits.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} logits, got {}",
                self.inner.logits.len(),
                logits.len()
            )));
        }
        self.inner.logits = logits;
        Ok(())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.logits.len()
    }

    /// Probability of opening a tool call on the first thought.
    fn tool_mass(&self, question_id: u32) -> PyResult<f64> {
        if question_id as usize >= self.inner.layout.num_questions {
            return Err(PyValueError::new_err(format!("question {question_id} out of range")));
        }
        Ok(self.inner.tool_mass(question_id))
    }

    fn copy(&self) -> Self {
        self.clone()
    }
}

/// One rollout.
#[pyclass(module = "axpo", frozen)]
struct Trajectory {
    inner: Arc<traj::Trajectory>,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn question_id(&self) -> u32 {
        self.inner.question_id
    }

    #[getter]
    fn reward(&self) -> u8 {
        self.inner.reward
    }

    #[getter]
    fn turn_count(&self) -> u32 {
        self.inner.turn_count
    }

    #[getter]
    fn is_tool_using(&self) -> bool {
        self.inner.is_tool_using()
    }

    /// Action id of every step.
    #[getter]
    fn actions(&self) -> Vec<u16> {
        self.inner.steps.iter().map(|s| s.action_id).collect()
    }

    /// One segment letter per step.
    #[getter]
    fn segments(&self) -> String {
        self.inner.steps.iter().map(|s| s.segment.letter()).collect()
    }

    /// Log-probabilities under the rollout policy; `None` on non-policy steps.
    #[getter]
    fn logp_old(&self) -> Vec<Option<f64>> {
        self.inner.steps.iter().map(|s| s.logp_old).collect()
    }

    /// Action ids of the first tool call, or `None` without a call.
    fn first_call_actions(&self) -> Option<Vec<u16>> {
        self.inner.first_call_actions()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory({})", self.inner)
    }
}

/// The rollouts of one question.
#[pyclass(module = "axpo", frozen)]
struct Group {
    inner: traj::Group,
}

#[pymethods]
impl Group {
    #[new]
    fn new(question_id: u32, rollouts: Vec<PyRef<'_, Trajectory>>) -> PyResult<Self> {
        let rollouts = rollouts.iter().map(|t| t.inner.as_ref().clone()).collect();
        Ok(Group { inner: traj::Group::new(question_id, rollouts).py()? })
    }

    #[getter]
    fn question_id(&self) -> u32 {
        self.inner.question_id
    }

    #[getter]
    fn rewards(&self) -> Vec<u8> {
        self.inner.rewards()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rollout(&self, index: usize) -> PyResult<Trajectory> {
        let t = self
            .inner
            .rollouts
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no rollout {index}")))?;
        Ok(Trajectory { inner: Arc::new(t.clone()) })
    }

    /// Indices of the tool-using rollouts when they are all wrong, else `None`.
    fn trigger(&self) -> Option<Vec<usize>> {
        core_axpo::detect_trigger(0, &self.inner).map(|t| t.tool_using_indices)
    }

    /// `(source_index, confidence)` of distinct prefixes, least confident first.
    /// Empty when the group does not trigger.
    fn rank_candidates(&self) -> PyResult<Vec<(usize, f64)>> {
        let Some(t) = core_axpo::detect_trigger(0, &self.inner) else {
            return Ok(Vec::new());
        };
        let ranked = core_axpo::rank_candidates(&self.inner, &t).py()?;
        Ok(ranked.into_iter().map(|c| (c.source_index, c.confidence)).collect())
    }
}

/// Synthetic agentic environment built from a preset name or a TOML file.
#[pyclass(module = "axpo", frozen)]
struct Env {
    params: EnvParams,
    spec: EnvSpec,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (preset = "gap-env"))]
    fn new(preset: &str) -> PyResult<Self> {
        let params = EnvParams::preset(preset).py()?;
        let spec = params.build().py()?;
        Ok(Env { params, spec })
    }

    #[getter]
    fn num_questions(&self) -> usize {
        self.spec.num_questions
    }

    #[getter]
    fn intents_per_question(&self) -> usize {
        self.spec.intents_per_question
    }

    #[getter]
    fn variants_per_intent(&self) -> usize {
        self.spec.variants_per_intent
    }

    /// Whether a question can only be solved through a tool.
    fn tool_necessary(&self, question_id: u32) -> PyResult<bool> {
        self.check(question_id)?;
        Ok(self.spec.question(question_id).tool_necessary)
    }

    fn initial_policy(&self) -> PyResult<Policy> {
        Ok(Policy { inner: self.params.initial_policy(&self.spec).py()? })
    }

    #[pyo3(signature = (policy, question_id, seed, index = 0))]
    fn sample_rollout(&self, policy: &Policy, question_id: u32, seed: u64, index: u64) -> PyResult<Trajectory> {
        self.check(question_id)?;
        let mut rng = rng::stream(seed, Purpose::Probe, &[question_id as u64, index]);
        let t = policy_env::sample_rollout(&policy.inner, &self.spec, question_id, &mut rng);
        Ok(Trajectory { inner: Arc::new(t) })
    }

    /// `n` independent rollouts of one question.
    fn sample_group(&self, policy: &Policy, question_id: u32, n: usize, seed: u64) -> PyResult<Group> {
        self.check(question_id)?;
        let mut rng = rng::stream(seed, Purpose::Probe, &[question_id as u64]);
        let rollouts = (0..n)
            .map(|_| policy_env::sample_rollout(&policy.inner, &self.spec, question_id, &mut rng))
            .collect();
        Ok(Group { inner: traj::Group::new(question_id, rollouts).py()? })
    }

    /// A fresh continuation of the first tool-call prefix of `source`.
    #[pyo3(signature = (policy, source, seed, index = 0))]
    fn sample_continuation(&self, policy: &Policy, source: &Trajectory, seed: u64, index: u64) -> PyResult<Trajectory> {
        let prefix = first_tool_prefix(&source.inner).py()?;
        let mut rng = rng::stream(seed, Purpose::Resample, &[source.inner.question_id as u64, index]);
        let t = policy_env::sample_continuation(&policy.inner, &self.spec, &prefix, &mut rng).py()?;
        Ok(Trajectory { inner: Arc::new(t) })
    }
}

impl Env {
    fn check(&self, question_id: u32) -> PyResult<()> {
        if question_id as usize >= self.spec.num_questions {
            return Err(PyValueError::new_err(format!("question {question_id} out of range")));
        }
        Ok(())
    }
}

/// Trains a configuration and returns the run directory.
///
/// `config` is an optional TOML file; `overrides` maps config keys to values.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None, resume = false))]
fn train(
    py: Python<'_>,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
    resume: bool,
) -> PyResult<String> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path).py()?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).py()?;
    }
    cfg.validate().py()?;
    let summary = py.detach(|| harness::train(&cfg, resume)).py()?;
    Ok(summary.run_dir.display().to_string())
}

/// Per-seed comparison table of two runs (`b - a`).
#[pyfunction]
fn compare(run_a: PathBuf, run_b: PathBuf) -> PyResult<String> {
    Ok(harness::compare(run_a, run_b).py()?.table())
}

#[pymodule]
fn axpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_class::<Policy>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Group>()?;
    m.add_function(wrap_pyfunction!(grpo_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(continuation_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_term, m)?)?;
    m.add_function(wrap_pyfunction!(budget_cap, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_raw, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_resample, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_check, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_count, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
