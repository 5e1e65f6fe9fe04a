//! Unsupervised training, threshold calibration, and checkpoints.

mod checkpoint;

use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::detector::{loss_gradients, names, BackboneSpec, DetectorModel, PrototypeInit, DEFAULT_D_H};
use crate::embedding::{EmbedderSpec, TrajectoryEmbeddings};
use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::numerics::{adam_step, AdamConfig, AdamState, Matrix};
use crate::trace::Trajectory;

/// Named hyperparameter presets for the two trace regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Hand-crafted traces.
    #[default]
    Hc,
    /// Algorithm-generated traces.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub d_h: usize,
    pub embedder: EmbedderSpec,
    pub backbone: BackboneSpec,
    pub with_gt: bool,
    /// Cut each training trajectory before its first labeled error step.
    pub exclude_labeled_steps: bool,
    pub prototype_init: PrototypeInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile(Profile::Hc)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (epochs, lr, lambda) = match profile {
            Profile::Hc => (10, 1e-4, 0.2),
            Profile::Auto => (5, 5e-5, 0.3),
        };
        TrainConfig {
            epochs,
            lr,
            weight_decay: 0.0,
            lambda,
            seed: 0,
            d_h: DEFAULT_D_H,
            embedder: EmbedderSpec::hashing(64),
            backbone: BackboneSpec::default(),
            with_gt: false,
            exclude_labeled_steps: false,
            prototype_init: PrototypeInit::Gaussian,
        }
    }

    pub fn hc() -> Self {
        TrainConfig::profile(Profile::Hc)
    }

    pub fn auto() -> Self {
        TrainConfig::profile(Profile::Auto)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MascError::precondition("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(MascError::precondition("lr must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(MascError::precondition("lambda and weight_decay must be non-negative"));
        }
        if self.d_h == 0 {
            return Err(MascError::precondition("d_h must be positive"));
        }
        self.embedder.validate()?;
        self.backbone.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_recon: f64,
    pub mean_proto: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub n_trajectories: usize,
    pub n_steps: usize,
    pub wall_time_secs: f64,
    pub params_digest: String,
    pub frozen_params_digest: String,
}

/// Drops every step from the first labeled error onward; trajectories that
/// start with an error are skipped.
pub fn strip_labeled_errors(trajectories: &[Trajectory]) -> Vec<Trajectory> {
    trajectories
        .iter()
        .filter_map(|t| match t.error_steps().first() {
            None => Some(t.clone()),
            Some(1) => None,
            Some(&k) => t.truncated(k - 1).ok(),
        })
        .collect()
}

/// Embeds the training set for `cfg` and trains on it.
pub fn train(cfg: &TrainConfig, train_set: &[Trajectory]) -> Result<(DetectorModel, TrainReport)> {
    cfg.validate()?;
    let owned;
    let data = if cfg.exclude_labeled_steps {
        owned = strip_labeled_errors(train_set);
        &owned[..]
    } else {
        train_set
    };
    let embedder = cfg.embedder.build()?;
    let probe = DetectorModel::new(cfg.embedder.dimension, cfg.d_h, cfg.backbone.clone(), cfg.seed)?;
    let http = HttpOptions::default();
    let embedded = data
        .iter()
        .map(|t| probe.prepare(embedder.as_ref(), t, cfg.with_gt, &http))
        .collect::<Result<Vec<_>>>()?;
    train_embedded(cfg, &embedded)
}

/// Training loop over already embedded trajectories: one forward pass, one
/// backward pass and one optimizer step per trajectory. Step labels are not
/// part of the input.
pub fn train_embedded(cfg: &TrainConfig, data: &[TrajectoryEmbeddings]) -> Result<(DetectorModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MascError::precondition("training set is empty"));
    }
    let start = Instant::now();
    let mut model = DetectorModel::new(cfg.embedder.dimension, cfg.d_h, cfg.backbone.clone(), cfg.seed)?;
    if cfg.prototype_init == PrototypeInit::EmbeddingMean {
        model.set_prototype(mean_step_embedding(data, model.d())?)?;
    }
    let frozen_before = model.frozen_params_digest();
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let n_steps: usize = data.iter().map(TrajectoryEmbeddings::len).sum();

    for epoch in 1..=cfg.epochs {
        let (mut recon, mut proto, mut total) = (0.0, 0.0, 0.0);
        for (i, emb) in data.iter().enumerate() {
            let context = |e: MascError| match e {
                MascError::Diverged(m) => MascError::Diverged(format!("epoch {epoch}, trajectory {i}: {m}")),
                other => other,
            };
            let r = loss_gradients(&model, emb, cfg.lambda).map_err(context)?;
            recon += r.loss.recon;
            proto += r.loss.proto;
            total += r.loss.total;
            // The stored prototype takes the attention refresh, then descends
            // along the gradient taken with respect to that refreshed value.
            let mut grads = r.grads;
            *grads.get_mut(names::PROTO).expect("prototype gradient") = Matrix::column(r.prototype_grad)?;
            let mut params = model.params().clone();
            *params.get_mut(names::PROTO).expect("prototype") = Matrix::column(r.loss.prototype)?;
            adam_step(&mut adam, &mut params, &grads).map_err(context)?;
            model.set_params(params)?;
        }
        let n = data.len() as f64;
        let stats = EpochStats { epoch, mean_recon: recon / n, mean_proto: proto / n, mean_total: total / n };
        debug!("epoch {epoch}: total {:.6} recon {:.6} proto {:.6}", stats.mean_total, stats.mean_recon, stats.mean_proto);
        epochs.push(stats);
    }
    debug_assert_eq!(frozen_before, model.frozen_params_digest());
    let report = TrainReport {
        epochs,
        n_trajectories: data.len(),
        n_steps,
        wall_time_secs: start.elapsed().as_secs_f64(),
        params_digest: model.params_digest(),
        frozen_params_digest: model.frozen_params_digest(),
    };
    Ok((model, report))
}

fn mean_step_embedding(data: &[TrajectoryEmbeddings], d: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for s in data.iter().flat_map(|e| &e.steps) {
        mean.iter_mut().zip(s.as_slice()).for_each(|(m, v)| *m += v);
        n += 1;
    }
    if n == 0 || mean.iter().all(|v| *v == 0.0) {
        return Err(MascError::Degenerate("step embeddings average to zero".into()));
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// Summary of the calibration score distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub delta: f64,
    pub quantile: f64,
    pub alpha: f64,
    pub beta: f64,
    pub scores: ScoreStats,
}

/// Empirical quantile of sorted data with linear interpolation between order
/// statistics: position `h = (n − 1)·q`, value `x[⌊h⌋] + (h − ⌊h⌋)(x[⌊h⌋+1] − x[⌊h⌋])`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(MascError::precondition("quantile of empty data"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(MascError::precondition("quantile must lie in [0, 1]"));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    Ok(sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]))
}

pub fn score_stats(scores: &[f64]) -> Result<ScoreStats> {
    if scores.is_empty() {
        return Err(MascError::precondition("no scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MascError::Diverged("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(ScoreStats {
        n: sorted.len(),
        min: sorted[0],
        mean,
        max: sorted[sorted.len() - 1],
        std: var.sqrt(),
        p50: quantile_sorted(&sorted, 0.5)?,
        p90: quantile_sorted(&sorted, 0.9)?,
        p95: quantile_sorted(&sorted, 0.95)?,
        p99: quantile_sorted(&sorted, 0.99)?,
    })
}

/// Threshold from raw scores already computed with `alpha`, `beta`.
pub fn calibrate_scores(scores: &[f64], quantile: f64, alpha: f64, beta: f64) -> Result<Calibration> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(MascError::precondition("calibration quantile must lie in (0, 1)"));
    }
    let stats = score_stats(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let delta = quantile_sorted(&sorted, quantile)?;
    Ok(Calibration { delta, quantile, alpha, beta, scores: stats })
}

/// Scores every step of the calibration set and sets `δ` to the requested quantile.
pub fn calibrate_threshold(
    model: &DetectorModel,
    calibration_set: &[TrajectoryEmbeddings],
    quantile: f64,
    alpha: f64,
    beta: f64,
) -> Result<Calibration> {
    if calibration_set.is_empty() {
        return Err(MascError::precondition("calibration set is empty"));
    }
    let mut scores = Vec::new();
    for emb in calibration_set {
        scores.extend(model.score_trajectory(emb, alpha, beta, f64::INFINITY)?.into_iter().map(|v| v.score));
    }
    calibrate_scores(&scores, quantile, alpha, beta)
}

/// Weights that put both score terms on unit scale over the calibration set:
/// `α = 1/std(recon)`, `β = 1/std(proto)`. Dropping the centering that a full
/// z-score would apply shifts every score by a constant, so the ranking and a
/// threshold calibrated under these weights are unaffected.
pub fn normalized_weights(model: &DetectorModel, calibration_set: &[TrajectoryEmbeddings]) -> Result<(f64, f64)> {
    let mut recon = Vec::new();
    let mut proto = Vec::new();
    for emb in calibration_set {
        for v in model.score_trajectory(emb, 1.0, 1.0, f64::INFINITY)? {
            recon.push(v.recon_term);
            proto.push(v.proto_term);
        }
    }
    let sr = score_stats(&recon)?.std;
    let sp = score_stats(&proto)?.std;
    if !(sr > 0.0 && sp > 0.0) {
        return Err(MascError::Degenerate("a score term has zero spread over the calibration set".into()));
    }
    Ok((1.0 / sr, 1.0 / sp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::normal_corpus;
    use crate::trace::Step;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            lr: 1e-3,
            d_h: 16,
            embedder: EmbedderSpec::hashing(8),
            backbone: BackboneSpec::frozen_mixer(8, 2, 1),
            ..TrainConfig::hc()
        }
    }

    #[test]
    fn profile_defaults() {
        let hc = TrainConfig::hc();
        assert_eq!((hc.epochs, hc.lr, hc.weight_decay, hc.d_h, hc.lambda), (10, 1e-4, 0.0, 384, 0.2));
        let auto = TrainConfig::auto();
        assert_eq!((auto.epochs, auto.lr, auto.weight_decay, auto.d_h, auto.lambda), (5, 5e-5, 0.0, 384, 0.3));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let data = normal_corpus(2, 3, 0).unwrap();
        assert!(matches!(train(&cfg, &data), Err(MascError::Precondition(_))));
    }

    #[test]
    fn training_is_deterministic_and_keeps_backbone_frozen() {
        let cfg = small_cfg();
        let data = normal_corpus(6, 4, 2).unwrap();
        let (m1, r1) = train(&cfg, &data).unwrap();
        let (m2, r2) = train(&cfg, &data).unwrap();
        assert_eq!(r1.params_digest, r2.params_digest);
        assert_eq!(m1.params(), m2.params());
        let fresh = DetectorModel::new(8, 16, cfg.backbone.clone(), cfg.seed).unwrap();
        assert_eq!(fresh.frozen_params_digest(), r1.frozen_params_digest);
        assert_ne!(fresh.params_digest(), r1.params_digest);
        assert_eq!(r1.epochs.len(), 3);
    }

    #[test]
    fn labels_do_not_influence_training() {
        let cfg = small_cfg();
        let data = normal_corpus(4, 4, 5).unwrap();
        let labeled: Vec<Trajectory> = data
            .iter()
            .map(|t| Trajectory {
                steps: t.steps.iter().map(|s| Step::labeled(&s.role, &s.output, s.output.len() % 2 == 0)).collect(),
                ..t.clone()
            })
            .collect();
        assert_eq!(train(&cfg, &data).unwrap().1.params_digest, train(&cfg, &labeled).unwrap().1.params_digest);
    }

    #[test]
    fn strip_cuts_before_first_error() {
        let t = Trajectory::new(
            "a",
            "q",
            None,
            vec![Step::labeled("r", "1", false), Step::labeled("r", "2", true), Step::labeled("r", "3", false)],
        )
        .unwrap();
        let first = Trajectory { steps: vec![Step::labeled("r", "x", true)], id: "b".into(), ..t.clone() };
        let out = strip_labeled_errors(&[t, first]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 1);
    }

    #[test]
    fn quantile_rules() {
        assert!(calibrate_scores(&[1.0, 2.0], 1.0, 1.0, 1.0).is_err());
        assert!(calibrate_scores(&[1.0, 2.0], 0.0, 1.0, 1.0).is_err());
        for q in [0.01, 0.5, 0.99] {
            assert_eq!(calibrate_scores(&[0.7; 9], q, 1.0, 1.0).unwrap().delta, 0.7);
        }
        let c = calibrate_scores(&[3.0, 1.0, 2.0, 4.0], 0.5, 1.0, 1.0).unwrap();
        assert_eq!(c.delta, 2.5);
    }
}
