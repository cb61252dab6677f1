//! Line-delimited trajectory log.
//!
//! One JSON object per line:
//!
//! ```text
//! {"run_id":"grpo-s1","step_index_in_training":3,"kind":"rollout","question_id":17,
//!  "rollout_index":2,"reward":0,"turn_count":2,"is_resample":false,"source_prefix_id":null,
//!  "steps":[{"a":1,"seg":"T","lp":-1.2039728043259361,"m":true}, ...]}
//! ```
//!
//! Log-probabilities are written in shortest round-trip form and parsed with
//! exact float round-tripping, so they survive a write/read cycle bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActionId, Segment, Step, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// A standard group rollout.
    Rollout,
    /// A continuation drawn from a fixed prefix.
    Resample,
    /// An evaluation rollout; never trained on.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub step: u32,
    pub kind: RecordKind,
    /// Position within the group (rollouts), the resample group (resamples) or
    /// the evaluation draws (eval).
    pub rollout_index: u32,
    pub is_resample: bool,
    /// `"<question_id>:<source_rollout_index>"` for resamples.
    pub source_prefix_id: Option<String>,
    pub trajectory: Trajectory,
}

impl TrajectoryRecord {
    pub fn prefix_id(question_id: u32, source_index: usize) -> String {
        format!("{question_id}:{source_index}")
    }

    /// Source rollout index encoded in `source_prefix_id`.
    pub fn source_index(&self) -> Option<usize> {
        self.source_prefix_id
            .as_deref()
            .and_then(|s| s.split_once(':'))
            .and_then(|(_, idx)| idx.parse().ok())
    }

    pub fn to_line(&self) -> String {
        let t = &self.trajectory;
        let wire = WireRecord {
            run_id: Some(self.run_id.clone()),
            step_index_in_training: Some(self.step),
            kind: Some(self.kind),
            question_id: Some(t.question_id),
            rollout_index: Some(self.rollout_index),
            reward: Some(t.reward),
            turn_count: Some(t.turn_count),
            is_resample: Some(self.is_resample),
            source_prefix_id: self.source_prefix_id.clone(),
            steps: Some(
                t.steps
                    .iter()
                    .map(|s| WireStep {
                        a: Some(s.action_id),
                        seg: Some(s.segment),
                        lp: s.logp_old,
                        m: Some(s.mask),
                    })
                    .collect(),
            ),
        };
        serde_json::to_string(&wire).expect("record serialization is infallible")
    }

    /// Parses one log line. `line` is the 1-based line number used in errors.
    pub fn parse_line(line: usize, text: &str) -> Result<Self> {
        let wire: WireRecord = serde_json::from_str(text)
            .map_err(|e| Error::parse(line, "<record>", e.to_string()))?;
        fn req<T>(v: Option<T>, line: usize, field: &str) -> Result<T> {
            v.ok_or_else(|| Error::parse(line, field, "missing"))
        }
        let reward = req(wire.reward, line, "reward")?;
        if reward > 1 {
            return Err(Error::parse(line, "reward", format!("{reward} is not 0 or 1")));
        }
        let raw_steps = req(wire.steps, line, "steps")?;
        let mut steps = Vec::with_capacity(raw_steps.len());
        for (i, s) in raw_steps.into_iter().enumerate() {
            let field = |name: &str| format!("steps[{i}].{name}");
            let segment = req(s.seg, line, &field("seg"))?;
            let step = Step {
                action_id: req(s.a, line, &field("a"))?,
                segment,
                logp_old: s.lp,
                mask: req(s.m, line, &field("m"))?,
            };
            if segment == Segment::Observation && step.logp_old.is_some() {
                return Err(Error::parse(line, field("lp"), "observation steps carry no log-probability"));
            }
            if segment == Segment::Observation && step.mask {
                return Err(Error::parse(line, field("m"), "observation steps are always masked"));
            }
            if let Some(lp) = step.logp_old {
                if lp > 0.0 {
                    return Err(Error::parse(line, field("lp"), format!("log-probability {lp} > 0")));
                }
            }
            steps.push(step);
        }
        let trajectory = Trajectory {
            question_id: req(wire.question_id, line, "question_id")?,
            steps,
            reward,
            turn_count: req(wire.turn_count, line, "turn_count")?,
        };
        trajectory
            .check_grammar()
            .map_err(|e| Error::parse(line, "steps", e.to_string()))?;
        Ok(TrajectoryRecord {
            run_id: req(wire.run_id, line, "run_id")?,
            step: req(wire.step_index_in_training, line, "step_index_in_training")?,
            kind: req(wire.kind, line, "kind")?,
            rollout_index: req(wire.rollout_index, line, "rollout_index")?,
            is_resample: req(wire.is_resample, line, "is_resample")?,
            source_prefix_id: wire.source_prefix_id,
            trajectory,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireStep {
    a: Option<ActionId>,
    seg: Option<Segment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lp: Option<f64>,
    m: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    run_id: Option<String>,
    step_index_in_training: Option<u32>,
    kind: Option<RecordKind>,
    question_id: Option<u32>,
    rollout_index: Option<u32>,
    reward: Option<u8>,
    turn_count: Option<u32>,
    is_resample: Option<bool>,
    source_prefix_id: Option<String>,
    steps: Option<Vec<WireStep>>,
}

/// Append-only writer for a trajectory log.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(LogWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(LogWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &TrajectoryRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_log(path: impl AsRef<Path>, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = LogWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(TrajectoryRecord::parse_line(i + 1, &line)?);
    }
    Ok(records)
}
