//! Side-by-side comparison of two completed runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{seed_dir, RunConfig, CONFIG_FILE, METRICS_FILE};
use crate::diagnostics::StepMetrics;
use crate::error::{Error, Result};

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(0, "<csv>", format!("{other:?}")),
    })?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(i + 2, "<row>", e.to_string())))
        .collect()
}

/// One metric summarized per seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub name: &'static str,
    pub a: Vec<Option<f64>>,
    pub b: Vec<Option<f64>>,
    /// `b - a` for seeds where both runs report the metric.
    pub deltas: Vec<Option<f64>>,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    pub mean_delta: Option<f64>,
    /// Sample standard deviation of the deltas over seeds.
    pub std_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricDelta>,
}

impl CompareReport {
    pub fn metric(&self, name: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:+.4}")).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ = writeln!(out, "a = {}\nb = {}", self.run_a.display(), self.run_b.display());
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("s{s}")).collect();
        let _ = writeln!(
            out,
            "{:<22} {:>9} {:>9} {:>9} {:>9}  {}",
            "metric",
            "mean a",
            "mean b",
            "delta",
            "std",
            seeds.join(" ")
        );
        for m in &self.metrics {
            let per: Vec<String> = m.deltas.iter().map(|d| fmt(*d)).collect();
            let _ = writeln!(
                out,
                "{:<22} {:>9} {:>9} {:>9} {:>9}  {}",
                m.name,
                fmt(m.mean_a),
                fmt(m.mean_b),
                fmt(m.mean_delta),
                fmt(m.std_delta),
                per.join(" ")
            );
        }
        out
    }
}

fn last(rows: &[StepMetrics], f: impl Fn(&StepMetrics) -> Option<f64>) -> Option<f64> {
    rows.iter().rev().find_map(f)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

type Extractor = fn(&[StepMetrics]) -> Option<f64>;

/// Final value of each metric, except the recovery rate, which is averaged over steps.
const SUMMARY: [(&str, Extractor); 8] = [
    ("final_tool_use_rate", |r| last(r, |m| m.tool_use_rate)),
    ("final_all_wrong_tool", |r| last(r, |m| m.all_wrong_tool)),
    ("final_all_wrong_no_tool", |r| last(r, |m| m.all_wrong_no_tool)),
    ("final_mean_reward", |r| last(r, |m| m.mean_reward)),
    ("final_pass1_eval", |r| last(r, |m| m.pass1_eval)),
    ("final_pass4_eval", |r| last(r, |m| m.pass4_eval)),
    ("mean_recovery_rate", |r| mean(r.iter().filter_map(|m| m.recovery_rate))),
    ("mean_extra_continuations", |r| mean(r.iter().map(|m| m.extra_continuations as f64))),
];

fn load_run(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::MissingRun(dir.to_path_buf()));
    }
    RunConfig::load(path)
}

/// Compares two runs seed by seed; deltas are `b - a`.
pub fn compare(run_a: impl AsRef<Path>, run_b: impl AsRef<Path>) -> Result<CompareReport> {
    let (dir_a, dir_b) = (run_a.as_ref(), run_b.as_ref());
    let (a, b) = (load_run(dir_a)?, load_run(dir_b)?);
    for (what, same) in [
        ("env", a.env == b.env),
        ("steps", a.steps == b.steps),
        ("group_size", a.group_size == b.group_size),
        ("questions_per_step", a.questions_per_step == b.questions_per_step),
        ("eval_rollouts", a.eval_rollouts == b.eval_rollouts),
    ] {
        if !same {
            return Err(Error::ConfigMismatch(format!("runs differ in {what}")));
        }
    }
    let seeds: Vec<u64> = a.seeds.iter().copied().filter(|s| b.seeds.contains(s)).collect();
    if seeds.is_empty() {
        return Err(Error::ConfigMismatch("runs share no seeds".into()));
    }
    let load = |dir: &Path, seed: u64| -> Result<Vec<StepMetrics>> {
        let path = seed_dir(dir, seed).join(METRICS_FILE);
        if !path.exists() {
            return Err(Error::MissingRun(seed_dir(dir, seed)));
        }
        read_metrics(path)
    };
    let rows_a = seeds.iter().map(|&s| load(dir_a, s)).collect::<Result<Vec<_>>>()?;
    let rows_b = seeds.iter().map(|&s| load(dir_b, s)).collect::<Result<Vec<_>>>()?;

    let metrics = SUMMARY
        .iter()
        .map(|&(name, f)| {
            let va: Vec<Option<f64>> = rows_a.iter().map(|r| f(r)).collect();
            let vb: Vec<Option<f64>> = rows_b.iter().map(|r| f(r)).collect();
            let deltas: Vec<Option<f64>> = va.iter().zip(&vb).map(|(x, y)| Some((*y)? - (*x)?)).collect();
            let present: Vec<f64> = deltas.iter().flatten().copied().collect();
            let mean_delta = mean(present.iter().copied());
            let std_delta = mean_delta.map(|m| {
                if present.len() < 2 {
                    0.0
                } else {
                    (present.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (present.len() - 1) as f64).sqrt()
                }
            });
            MetricDelta {
                name,
                mean_a: mean(va.iter().flatten().copied()),
                mean_b: mean(vb.iter().flatten().copied()),
                a: va,
                b: vb,
                deltas,
                mean_delta,
                std_delta,
            }
        })
        .collect();
    Ok(CompareReport {
        run_a: dir_a.to_path_buf(),
        run_b: dir_b.to_path_buf(),
        seeds,
        metrics,
    })
}
