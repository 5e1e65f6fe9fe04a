//! Detection metrics, score histograms, and embedding-space diagnostics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{embed_trajectory, Embedder};
use crate::error::{MascError, Result};
use crate::numerics::{norm, sq_dist};
use crate::trace::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub trajectory_id: String,
    pub t: usize,
    pub score: f64,
    pub label: bool,
}

/// Mann–Whitney AUC: the probability that a random error step outscores a
/// random normal step, ties counted one half. Computed from average ranks.
pub fn auc_roc(scored: &[ScoredStep]) -> Result<f64> {
    let mut items: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.label)).collect();
    auc_from_pairs(&mut items)
}

fn auc_from_pairs(items: &mut [(f64, bool)]) -> Result<f64> {
    let n_pos = items.iter().filter(|(_, l)| *l).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MascError::Degenerate("degenerate labels".into()));
    }
    if items.iter().any(|(s, _)| s.is_nan()) {
        return Err(MascError::Degenerate("NaN score".into()));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].0 == items[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * items[i..=j].iter().filter(|(_, l)| *l).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of `(predicted, annotated)` pairs that agree.
pub fn step_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MascError::precondition("no trajectories to localize"));
    }
    Ok(pairs.iter().filter(|(p, a)| p == a).count() as f64 / pairs.len() as f64)
}

/// Argmax localization over trajectories with exactly one annotated error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub accuracy: Option<f64>,
    pub evaluated: usize,
    pub excluded_no_error: usize,
    pub excluded_multiple_errors: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Groups steps by trajectory (first-appearance order), predicts the
/// highest-scoring step (earliest on ties) and compares it to the annotation.
pub fn localize(scored: &[ScoredStep]) -> Localization {
    let mut pairs = Vec::new();
    let (mut none, mut multi) = (0, 0);
    for steps in group_by_trajectory(scored) {
        let errors: Vec<usize> = steps.iter().filter(|s| s.label).map(|s| s.t).collect();
        match errors.len() {
            0 => none += 1,
            1 => {
                let best = steps
                    .iter()
                    .fold(None::<&ScoredStep>, |acc, s| match acc {
                        Some(b) if b.score >= s.score => Some(b),
                        _ => Some(s),
                    })
                    .expect("non-empty group");
                pairs.push((best.t, errors[0]));
            }
            _ => multi += 1,
        }
    }
    Localization {
        accuracy: step_accuracy(&pairs).ok(),
        evaluated: pairs.len(),
        excluded_no_error: none,
        excluded_multiple_errors: multi,
        pairs,
    }
}

fn group_by_trajectory(scored: &[ScoredStep]) -> Vec<Vec<&ScoredStep>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&ScoredStep>> = Vec::new();
    for s in scored {
        let k = *index.entry(&s.trajectory_id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[k].push(s);
    }
    groups
}

/// Per-step accuracy of the thresholded flag `score > δ` against labels.
pub fn flag_accuracy(scored: &[ScoredStep], delta: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(MascError::precondition("no scored steps"));
    }
    Ok(scored.iter().filter(|s| (s.score > delta) == s.label).count() as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub normal_count: u64,
    pub error_count: u64,
}

/// Aligned normal/error histograms over a shared range. Bins are half-open
/// except the last; values outside the range land in the nearest end bin.
pub fn score_histogram(scored: &[ScoredStep], bins: usize, range: Option<(f64, f64)>) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(MascError::precondition("histogram needs at least 2 bins"));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo < hi && lo.is_finite() && hi.is_finite() => (lo, hi),
        Some(_) => return Err(MascError::precondition("histogram range must be finite with lo < hi")),
        None => {
            let lo = scored.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
            let hi = scored.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo, lo + 1.0)
            } else {
                (lo, hi)
            }
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_lo: lo + width * i as f64,
            bin_hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            normal_count: 0,
            error_count: 0,
        })
        .collect();
    for s in scored {
        let k = if s.score.is_nan() {
            continue;
        } else {
            (((s.score - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        };
        if s.label {
            out[k].error_count += 1;
        } else {
            out[k].normal_count += 1;
        }
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,normal_count,error_count\n");
    for b in bins {
        s.push_str(&format!("{},{},{},{}\n", b.bin_lo, b.bin_hi, b.normal_count, b.error_count));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_roc: Option<f64>,
    /// Argmax localization accuracy over single-error trajectories.
    pub step_accuracy: Option<f64>,
    /// Per-step accuracy of `score > δ`, when a threshold is supplied.
    pub flag_accuracy: Option<f64>,
    pub delta: Option<f64>,
    pub n_steps: usize,
    pub n_trajectories: usize,
    pub n_error_steps: usize,
    pub localized_trajectories: usize,
    pub excluded_no_error: usize,
    pub excluded_multiple_errors: usize,
    pub histogram: Vec<HistogramBin>,
}

pub fn evaluate(scored: &[ScoredStep], delta: Option<f64>, bins: usize) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(MascError::precondition("no scored steps"));
    }
    let loc = localize(scored);
    Ok(MetricsReport {
        auc_roc: auc_roc(scored).ok(),
        step_accuracy: loc.accuracy,
        flag_accuracy: delta.map(|d| flag_accuracy(scored, d)).transpose()?,
        delta,
        n_steps: scored.len(),
        n_trajectories: group_by_trajectory(scored).len(),
        n_error_steps: scored.iter().filter(|s| s.label).count(),
        localized_trajectories: loc.evaluated,
        excluded_no_error: loc.excluded_no_error,
        excluded_multiple_errors: loc.excluded_multiple_errors,
        histogram: score_histogram(scored, bins, None)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceDiagnostics {
    /// L2 distance between the normal and error class means.
    pub inter: f64,
    /// Mean L2 distance of normal points to the normal mean.
    pub intra: f64,
}

fn mean_of<'a>(points: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, usize) {
    let mut m = vec![0.0; dim];
    let mut n = 0;
    for p in points {
        m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        n += 1;
    }
    if n > 0 {
        m.iter_mut().for_each(|a| *a /= n as f64);
    }
    (m, n)
}

/// Inter/intra distances over labeled points (`true` = error).
pub fn distance_diagnostics(points: &[(Vec<f64>, bool)]) -> Result<DistanceDiagnostics> {
    let dim = points.first().map_or(0, |p| p.0.len());
    if points.iter().any(|p| p.0.len() != dim) {
        return Err(MascError::shape("points differ in dimension"));
    }
    let (normal_mean, n_norm) = mean_of(points.iter().filter(|p| !p.1).map(|p| p.0.as_slice()), dim);
    let (error_mean, n_err) = mean_of(points.iter().filter(|p| p.1).map(|p| p.0.as_slice()), dim);
    if n_norm == 0 || n_err == 0 {
        return Err(MascError::Degenerate("diagnostics need both normal and error steps".into()));
    }
    let intra = points
        .iter()
        .filter(|p| !p.1)
        .map(|p| sq_dist(&p.0, &normal_mean).sqrt())
        .sum::<f64>()
        / n_norm as f64;
    let diff: Vec<f64> = normal_mean.iter().zip(&error_mean).map(|(a, b)| a - b).collect();
    Ok(DistanceDiagnostics { inter: norm(&diff), intra })
}

fn labeled_step_embeddings(
    trajectories: &[Trajectory],
    embedder: &dyn Embedder,
) -> Result<Vec<(Vec<Vec<f64>>, Vec<bool>)>> {
    trajectories
        .iter()
        .filter(|t| t.is_labeled())
        .map(|t| {
            let e = embed_trajectory(embedder, t, false)?;
            let vs = e.steps.iter().map(|s| s.as_slice().to_vec()).collect();
            Ok((vs, t.steps.iter().map(|s| s.is_error()).collect()))
        })
        .collect()
}

/// Distances between raw step embeddings of fully labeled trajectories.
pub fn embedding_distance_diagnostics(trajectories: &[Trajectory], embedder: &dyn Embedder) -> Result<DistanceDiagnostics> {
    let points: Vec<(Vec<f64>, bool)> = labeled_step_embeddings(trajectories, embedder)?
        .into_iter()
        .flat_map(|(vs, ls)| vs.into_iter().zip(ls))
        .collect();
    distance_diagnostics(&points)
}

/// Same diagnostics after concatenating each step embedding with its nearest
/// (L2) other step from the same trajectory; a single-step trajectory pairs
/// the step with itself.
pub fn augmented_distance_diagnostics(
    trajectories: &[Trajectory],
    embedder: &dyn Embedder,
) -> Result<DistanceDiagnostics> {
    let mut points = Vec::new();
    for (vs, ls) in labeled_step_embeddings(trajectories, embedder)? {
        for (i, v) in vs.iter().enumerate() {
            let nn = (0..vs.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| sq_dist(v, &vs[a]).total_cmp(&sq_dist(v, &vs[b])))
                .unwrap_or(i);
            let mut aug = v.clone();
            aug.extend_from_slice(&vs[nn]);
            points.push((aug, ls[i]));
        }
    }
    distance_diagnostics(&points)
}
