//! Trajectory data model and JSONL ingestion.
//!
//! One trajectory per line:
//!
//! ```text
//! {"id": str, "query": str, "gt_answer": str|null, "steps": [{"role": str, "output": str, "label": 0|1|null}, ...]}
//! ```
//!
//! Step indices are 1-based throughout the crate: step `t` of a trajectory is
//! `steps[t - 1]`, and the history visible at step `t` is `steps[..t - 1]`.

use std::collections::HashSet;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{MascError, Result};

/// One agent action: who acted and what it emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub role: String,
    pub output: String,
    /// `Some(true)` marks an annotated error step.
    pub label: Option<bool>,
}

impl Step {
    pub fn new(role: impl Into<String>, output: impl Into<String>) -> Self {
        Step { role: role.into(), output: output.into(), label: None }
    }

    pub fn labeled(role: impl Into<String>, output: impl Into<String>, is_error: bool) -> Self {
        Step { role: role.into(), output: output.into(), label: Some(is_error) }
    }

    pub fn is_error(&self) -> bool {
        self.label == Some(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub id: String,
    pub query: String,
    pub gt_answer: Option<String>,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Builds a trajectory, enforcing the same invariants as the parser.
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        gt_answer: Option<String>,
        steps: Vec<Step>,
    ) -> Result<Self> {
        let t = Trajectory { id: id.into(), query: query.into(), gt_answer, steps };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(MascError::Validation("empty id".into()));
        }
        if self.query.is_empty() {
            return Err(MascError::Validation("empty query".into()));
        }
        if self.steps.is_empty() {
            return Err(MascError::Validation("empty steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.role.is_empty() {
                return Err(MascError::Validation(format!("step {}: empty role", i + 1)));
            }
            if s.output.is_empty() {
                return Err(MascError::Validation(format!("step {}: empty output", i + 1)));
            }
        }
        Ok(())
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step `t` (1-based).
    pub fn step(&self, t: usize) -> Option<&Step> {
        t.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// 1-based indices of annotated error steps.
    pub fn error_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_error())
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.steps.iter().all(|s| s.label.is_some())
    }

    /// Keeps the first `t` steps.
    pub fn truncated(&self, t: usize) -> Result<Trajectory> {
        if t == 0 || t > self.len() {
            return Err(MascError::precondition(format!(
                "truncation length {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(Trajectory { steps: self.steps[..t].to_vec(), ..self.clone() })
    }
}

/// How unknown keys are treated during parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Unknown keys are ignored and reported.
    #[default]
    Lenient,
    /// Unknown keys are a validation error.
    Strict,
}

/// Result of a lenient parse: the trajectory plus any ignored keys.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub trajectory: Trajectory,
    pub unknown_keys: Vec<String>,
}

const TRAJECTORY_KEYS: [&str; 4] = ["id", "query", "gt_answer", "steps"];
const STEP_KEYS: [&str; 3] = ["role", "output", "label"];

/// Parses one JSONL line in lenient mode; ignored keys are logged.
pub fn parse_trajectory(line: &[u8]) -> Result<Trajectory> {
    let parsed = parse_trajectory_with(line, ParseMode::Lenient)?;
    for key in &parsed.unknown_keys {
        log::warn!("trajectory {}: ignoring unknown key {key:?}", parsed.trajectory.id);
    }
    Ok(parsed.trajectory)
}

pub fn parse_trajectory_with(line: &[u8], mode: ParseMode) -> Result<Parsed> {
    let value: Value = serde_json::from_slice(line).map_err(|e| MascError::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| MascError::Validation("top-level value is not an object".into()))?;

    let mut unknown = Vec::new();
    collect_unknown(obj, &TRAJECTORY_KEYS, "", &mut unknown);

    let id = required_str(obj, "id")?;
    let query = required_str(obj, "query")?;
    let gt_answer = match obj.get("gt_answer") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(MascError::Validation("gt_answer must be a string or null".into())),
    };
    let raw_steps = obj
        .get("steps")
        .and_then(Value::as_array)
        .ok_or_else(|| MascError::Validation("missing or non-array \"steps\"".into()))?;

    let mut steps = Vec::with_capacity(raw_steps.len());
    for (i, raw) in raw_steps.iter().enumerate() {
        let so = raw
            .as_object()
            .ok_or_else(|| MascError::Validation(format!("step {} is not an object", i + 1)))?;
        collect_unknown(so, &STEP_KEYS, &format!("steps[{i}]."), &mut unknown);
        let label = match so.get("label") {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(0) if v.is_u64() => Some(false),
                Some(1) if v.is_u64() => Some(true),
                _ => {
                    return Err(MascError::Validation(format!(
                        "step {}: label must be 0, 1 or null, got {v}",
                        i + 1
                    )))
                }
            },
        };
        steps.push(Step {
            role: required_str(so, "role").map_err(|e| step_ctx(i, e))?,
            output: required_str(so, "output").map_err(|e| step_ctx(i, e))?,
            label,
        });
    }

    if mode == ParseMode::Strict && !unknown.is_empty() {
        return Err(MascError::Validation(format!("unknown keys: {}", unknown.join(", "))));
    }
    let trajectory = Trajectory { id, query, gt_answer, steps };
    trajectory.validate()?;
    Ok(Parsed { trajectory, unknown_keys: unknown })
}

fn step_ctx(i: usize, e: MascError) -> MascError {
    match e {
        MascError::Validation(m) => MascError::Validation(format!("step {}: {m}", i + 1)),
        other => other,
    }
}

fn required_str(obj: &Map<String, Value>, key: &str) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(MascError::Validation(format!("{key:?} must be a string"))),
        None => Err(MascError::Validation(format!("missing {key:?}"))),
    }
}

fn collect_unknown(obj: &Map<String, Value>, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

// serde_json reports 1-based line/column (column counted in bytes).
fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (n, chunk) in input.split(|&b| b == b'\n').enumerate() {
        if n + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += chunk.len() + 1;
    }
    input.len()
}

#[derive(Serialize)]
struct StepOut<'a> {
    role: &'a str,
    output: &'a str,
    label: Option<u8>,
}

#[derive(Serialize)]
struct TrajectoryOut<'a> {
    id: &'a str,
    query: &'a str,
    gt_answer: Option<&'a str>,
    steps: Vec<StepOut<'a>>,
}

/// Canonical one-line encoding: keys in the order `id, query, gt_answer, steps`,
/// absent optionals written as `null`, terminated by `\n`.
pub fn serialize_trajectory(t: &Trajectory) -> Vec<u8> {
    let out = TrajectoryOut {
        id: &t.id,
        query: &t.query,
        gt_answer: t.gt_answer.as_deref(),
        steps: t
            .steps
            .iter()
            .map(|s| StepOut { role: &s.role, output: &s.output, label: s.label.map(u8::from) })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&out).expect("trajectory serialization is infallible");
    bytes.push(b'\n');
    bytes
}

/// Reads a JSONL stream; blank lines are skipped. Errors carry the 1-based line number.
pub fn read_trajectories<R: BufRead>(reader: R, mode: ParseMode) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (n, line) in reader.split(b'\n').enumerate() {
        let mut line = line?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let parsed = parse_trajectory_with(&line, mode).map_err(|e| match e {
            MascError::Parse { offset, message } => {
                MascError::Parse { offset, message: format!("line {}: {message}", n + 1) }
            }
            MascError::Validation(m) => MascError::Validation(format!("line {}: {m}", n + 1)),
            other => other,
        })?;
        for key in &parsed.unknown_keys {
            log::warn!("line {}: ignoring unknown key {key:?}", n + 1);
        }
        out.push(parsed.trajectory);
    }
    Ok(out)
}

pub fn write_trajectories<W: std::io::Write>(mut w: W, ts: &[Trajectory]) -> Result<()> {
    for t in ts {
        w.write_all(&serialize_trajectory(t))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded shuffle, then the first `round(ratio * n)` trajectories go to `train`.
pub fn split_dataset(trajectories: &[Trajectory], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if trajectories.len() < 2 {
        return Err(MascError::precondition("cannot split fewer than 2 trajectories"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MascError::precondition(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut seen = HashSet::new();
    for t in trajectories {
        if !seen.insert(t.id.as_str()) {
            return Err(MascError::Validation(format!("duplicate trajectory id {:?}", t.id)));
        }
    }
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * trajectories.len() as f64).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);
    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| trajectories[i].clone()).collect(),
        test: test_idx.iter().map(|&i| trajectories[i].clone()).collect(),
        seed,
        ratio,
    })
}

/// Counts labeled error steps by relative position: an error at step `t` of a
/// length-`T` trajectory lands in bin `floor((t - 1) / T * bins)`.
pub fn error_position_histogram(trajectories: &[Trajectory], bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(MascError::precondition("bins must be >= 1"));
    }
    let mut counts = vec![0u64; bins];
    let mut any = false;
    for traj in trajectories {
        let len = traj.len();
        for t in traj.error_steps() {
            // Integer form of floor((t-1)/T * bins), exact for all sizes.
            let bin = ((t - 1) * bins / len).min(bins - 1);
            counts[bin] += 1;
            any = true;
        }
    }
    if !any {
        return Err(MascError::Degenerate("no labels".into()));
    }
    Ok(counts)
}
