//! Checkpoint-driven scoring and the per-step score table.

use serde::{Deserialize, Serialize};

use crate::detector::AnomalyVerdict;
use crate::error::{MascError, Result};
use crate::evaluation::ScoredStep;
use crate::http::HttpOptions;
use crate::trace::Trajectory;
use crate::training::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub trajectory_id: String,
    pub t: usize,
    pub score: f64,
    pub recon_term: f64,
    pub proto_term: f64,
    pub flagged: bool,
}

impl ScoreRow {
    fn from_verdict(id: &str, v: &AnomalyVerdict) -> Self {
        ScoreRow {
            trajectory_id: id.to_string(),
            t: v.t,
            score: v.score,
            recon_term: v.recon_term,
            proto_term: v.proto_term,
            flagged: v.flagged,
        }
    }
}

/// Weights and threshold to score with: the checkpoint's unless overridden.
/// Without a calibration and without an override nothing is flagged.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
}

pub fn resolve_weights(ck: &Checkpoint, o: ScoreOverrides) -> (f64, f64, f64) {
    let delta = o.delta.or(ck.calibration.as_ref().map(|c| c.delta)).unwrap_or(f64::INFINITY);
    (o.alpha.unwrap_or(ck.alpha), o.beta.unwrap_or(ck.beta), delta)
}

/// Every step verdict of every trajectory, in input order.
pub fn score_corpus(
    ck: &Checkpoint,
    trajectories: &[Trajectory],
    overrides: ScoreOverrides,
    http: &HttpOptions,
) -> Result<Vec<(String, AnomalyVerdict)>> {
    let (alpha, beta, delta) = resolve_weights(ck, overrides);
    let embedder = ck.embedder.build_with(http.clone())?;
    let mut out = Vec::new();
    for t in trajectories {
        let emb = ck.model.prepare(embedder.as_ref(), t, ck.with_gt, http)?;
        for v in ck.model.score_trajectory(&emb, alpha, beta, delta)? {
            out.push((t.id.clone(), v));
        }
    }
    Ok(out)
}

pub fn score_rows(verdicts: &[(String, AnomalyVerdict)]) -> Vec<ScoreRow> {
    verdicts.iter().map(|(id, v)| ScoreRow::from_verdict(id, v)).collect()
}

/// CSV with header `trajectory_id,t,score,recon_term,proto_term,flagged`.
/// Floats use the shortest representation that reads back exactly.
pub fn write_scores_csv(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MascError::Validation(format!("score csv: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record(["trajectory_id", "t", "score", "recon_term", "proto_term", "flagged"])
            .map_err(|e| MascError::Validation(format!("score csv: {e}")))?;
    }
    w.into_inner().map_err(|e| MascError::Validation(format!("score csv: {e}")))
}

pub fn read_scores_csv(bytes: &[u8]) -> Result<Vec<ScoreRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| MascError::Parse { offset: i + 1, message: format!("score csv row {}: {e}", i + 1) }))
        .collect()
}

/// Attaches step labels from `trajectories` to score rows. Every row must
/// match a labeled step.
pub fn join_labels(rows: &[ScoreRow], trajectories: &[Trajectory]) -> Result<Vec<ScoredStep>> {
    let by_id: std::collections::HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.id.as_str(), t)).collect();
    rows.iter()
        .map(|r| {
            let traj = by_id
                .get(r.trajectory_id.as_str())
                .ok_or_else(|| MascError::Validation(format!("no trajectory {:?} for score row", r.trajectory_id)))?;
            let step = traj
                .step(r.t)
                .ok_or_else(|| MascError::Validation(format!("trajectory {:?} has no step {}", r.trajectory_id, r.t)))?;
            let label = step
                .label
                .ok_or_else(|| MascError::Validation(format!("step {} of {:?} is unlabeled", r.t, r.trajectory_id)))?;
            Ok(ScoredStep { trajectory_id: r.trajectory_id.clone(), t: r.t, score: r.score, label })
        })
        .collect()
}
