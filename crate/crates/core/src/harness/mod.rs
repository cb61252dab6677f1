//! Experiment driver: run configuration, training, gradient checks and run
//! comparison.

mod compare;
mod gradcheck;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::ObjectiveConfig;
use crate::error::{Error, Result};
use crate::policy_env::EnvParams;

pub use compare::{compare, read_metrics, CompareReport, MetricDelta};
pub use gradcheck::{gradcheck, GradcheckCase, GradcheckReport, Regime};
pub use train::{resume_seed, train, train_seed, Checkpoint, RunSummary, SeedRun, StopAt};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "AXPO_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Axpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Axpo => "axpo",
        }
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Flat run configuration, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Run directory name under `output_dir`; defaults to the algorithm name.
    pub run_name: Option<String>,
    pub output_dir: PathBuf,
    pub env: String,
    /// N
    pub group_size: usize,
    /// K
    pub resample_k: usize,
    /// r
    pub resample_ratio: f64,
    /// B
    pub questions_per_step: usize,
    pub steps: u32,
    pub seeds: Vec<u64>,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: u32,
    pub eval_every: u32,
    pub eval_rollouts: usize,
    pub checkpoint_every: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let obj = ObjectiveConfig::default();
        RunConfig {
            algorithm: Algorithm::Axpo,
            run_name: None,
            output_dir: default_output_dir(),
            env: "gap-env".into(),
            group_size: 8,
            resample_k: 4,
            resample_ratio: 0.25,
            questions_per_step: 32,
            steps: 200,
            seeds: vec![1, 2, 3, 4, 5],
            eps_low: obj.eps_low,
            eps_high: obj.eps_high,
            beta: obj.beta,
            lr: obj.learning_rate,
            epochs: obj.epochs_per_batch,
            eval_every: 20,
            eval_rollouts: 4,
            checkpoint_every: 25,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Overrides one key from its textual value, as given on the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.group_size < 2 {
            return err("group_size (N) must be at least 2");
        }
        if self.resample_k < 2 {
            return err("resample_k (K) must be at least 2");
        }
        if !(0.0..1.0).contains(&self.resample_ratio) {
            return err("resample_ratio (r) must lie in [0, 1)");
        }
        if self.questions_per_step == 0 {
            return err("questions_per_step (B) must be positive");
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required");
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return err("eval_every and checkpoint_every must be positive");
        }
        if self.eval_rollouts < 4 {
            return err("eval_rollouts must be at least 4 for pass@4");
        }
        let env = self.env_params()?;
        if self.questions_per_step > env.num_questions {
            return err("questions_per_step exceeds the number of questions");
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            beta: self.beta,
            epochs_per_batch: self.epochs,
            learning_rate: self.lr,
        }
    }

    pub fn env_params(&self) -> Result<EnvParams> {
        EnvParams::preset(&self.env)
    }

    pub fn run_dir(&self) -> PathBuf {
        let name = self.run_name.clone().unwrap_or_else(|| self.algorithm.name().to_string());
        self.output_dir.join(name)
    }

    /// Resample ratio actually used: GRPO never resamples.
    pub fn effective_ratio(&self) -> f64 {
        match self.algorithm {
            Algorithm::Grpo => 0.0,
            Algorithm::Axpo => self.resample_ratio,
        }
    }
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAM_FILE: &str = "tool_histogram.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
