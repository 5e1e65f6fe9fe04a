//! Next-step reconstruction detector.
//!
//! At step `t` the query and the history `h_1..h_{t-1}` are projected to the
//! hidden width (`f_q`, `f_h`), run through a frozen causal backbone, and the
//! final state is mapped back to step-embedding width by `f_theta`, giving the
//! prediction `x̂_t`. The realized step embedding `x_t = h_t` is scored by
//!
//! ```text
//! s(t) = α ‖x̂_t − x_t‖² + β (1 − cos(x̂_t, p))
//! ```
//!
//! where `p` is a learned prototype. During training `p` is refreshed by
//! single-head attention over the trajectory's predictions; at inference it is
//! read-only.

mod backbone;
mod graph;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{remote_context_states, render_context, BackboneKind, BackboneSpec, FrozenMixer};
pub use graph::{loss_gradients, GradientResult};

use crate::embedding::{embed_trajectory, Embedder, EmbeddingVector, StepEmbedding, TrajectoryEmbeddings};
use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::numerics::{attention, cosine, linear, sq_dist, AttentionOutput, Matrix, Params};
use crate::trace::Trajectory;

/// Parameter names, in checkpoint order.
pub mod names {
    pub const F_Q_W: &str = "f_q.weight";
    pub const F_Q_B: &str = "f_q.bias";
    pub const F_H_W: &str = "f_h.weight";
    pub const F_H_B: &str = "f_h.bias";
    pub const F_THETA_W: &str = "f_theta.weight";
    pub const F_THETA_B: &str = "f_theta.bias";
    pub const W_Q: &str = "attn.w_q";
    pub const W_K: &str = "attn.w_k";
    pub const W_V: &str = "attn.w_v";
    pub const PROTO: &str = "prototype";
}

/// Default unified hidden width of the projections.
pub const DEFAULT_D_H: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeInit {
    /// `N(0, 1/√d)` per coordinate.
    #[default]
    Gaussian,
    /// Mean of the training step embeddings.
    EmbeddingMean,
}

/// All learnable parameters plus the frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    d_e: usize,
    d_h: usize,
    d: usize,
    seed: u64,
    backbone_spec: BackboneSpec,
    mixer: Option<FrozenMixer>,
    params: Params,
}

/// A prediction for one step next to what was realized.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub t: usize,
    pub x_hat: Vec<f64>,
    pub x: Vec<f64>,
}

/// Score of one step and how it decomposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub t: usize,
    pub score: f64,
    pub recon_term: f64,
    pub proto_term: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub flagged: bool,
}

impl AnomalyVerdict {
    pub fn with_threshold(mut self, delta: f64) -> Self {
        self.delta = delta;
        self.flagged = self.score > delta;
        self
    }
}

/// Per-trajectory training objective and the refreshed prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub proto: f64,
    pub total: f64,
    pub prototype: Vec<f64>,
}

fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl DetectorModel {
    /// Fresh model with seeded initial weights. `d = 2·d_e`.
    pub fn new(d_e: usize, d_h: usize, backbone: BackboneSpec, seed: u64) -> Result<Self> {
        if d_e == 0 || d_h == 0 {
            return Err(MascError::config("d_e and d_h must be positive"));
        }
        backbone.validate()?;
        let d = 2 * d_e;
        let hidden = backbone.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mixer = match backbone.kind {
            BackboneKind::FrozenMixer => {
                params.insert(names::F_Q_W, init_uniform(&mut rng, d_h, d_e, d_e));
                params.insert(names::F_Q_B, init_uniform(&mut rng, d_h, 1, d_e));
                params.insert(names::F_H_W, init_uniform(&mut rng, d_h, d, d));
                params.insert(names::F_H_B, init_uniform(&mut rng, d_h, 1, d));
                Some(FrozenMixer::new(&backbone, d_h)?)
            }
            BackboneKind::RemoteLlm => None,
        };
        params.insert(names::F_THETA_W, init_uniform(&mut rng, d, hidden, hidden));
        params.insert(names::F_THETA_B, init_uniform(&mut rng, d, 1, hidden));
        params.insert(names::W_Q, init_uniform(&mut rng, d, d, d));
        params.insert(names::W_K, init_uniform(&mut rng, d, d, d));
        params.insert(names::W_V, init_uniform(&mut rng, d, d, d));
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let p: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        params.insert(names::PROTO, Matrix::column(p)?);
        Ok(DetectorModel { d_e, d_h, d, seed, backbone_spec: backbone, mixer, params })
    }

    /// Rebuilds a model from stored parameters; the backbone is regenerated
    /// from its spec.
    pub fn from_parts(d_e: usize, d_h: usize, backbone: BackboneSpec, seed: u64, params: Params) -> Result<Self> {
        let template = DetectorModel::new(d_e, d_h, backbone, seed)?;
        if !template.params.same_layout(&params) {
            return Err(MascError::shape("parameter layout does not match model dimensions"));
        }
        if !params.all_finite() {
            return Err(MascError::Validation("non-finite parameter".into()));
        }
        Ok(DetectorModel { params, ..template })
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone_spec(&self) -> &BackboneSpec {
        &self.backbone_spec
    }

    pub fn mixer(&self) -> Option<&FrozenMixer> {
        self.mixer.as_ref()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces the learnable parameters; the layout must match.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(MascError::shape("parameter layout does not match model"));
        }
        self.params = params;
        Ok(())
    }

    pub fn prototype(&self) -> &[f64] {
        self.param(names::PROTO).as_slice()
    }

    pub fn set_prototype(&mut self, p: Vec<f64>) -> Result<()> {
        if p.len() != self.d {
            return Err(MascError::shape(format!("prototype of length {} for d = {}", p.len(), self.d)));
        }
        *self.params.get_mut(names::PROTO).expect("prototype") = Matrix::column(p)?;
        Ok(())
    }

    fn param(&self, name: &str) -> &Matrix {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// SHA-256 over all learnable parameters in name order.
    pub fn params_digest(&self) -> String {
        params_digest(&self.params)
    }

    /// SHA-256 over the frozen backbone weights (empty-input digest for a
    /// remote backbone, which holds none).
    pub fn frozen_params_digest(&self) -> String {
        match &self.mixer {
            Some(m) => m.digest(),
            None => hex::encode(Sha256::digest(b"")),
        }
    }

    /// Embeds a trajectory and, for a remote backbone, fetches its context states.
    pub fn prepare(
        &self,
        embedder: &dyn Embedder,
        trajectory: &Trajectory,
        with_gt: bool,
        http: &HttpOptions,
    ) -> Result<TrajectoryEmbeddings> {
        if embedder.dimension() != self.d_e {
            return Err(MascError::config(format!(
                "embedder dimension {} does not match model d_e {}",
                embedder.dimension(),
                self.d_e
            )));
        }
        let mut emb = embed_trajectory(embedder, trajectory, with_gt)?;
        if self.backbone_spec.is_remote() {
            emb.context_states = remote_context_states(&self.backbone_spec, trajectory, with_gt, http.clone())?;
        }
        Ok(emb)
    }

    pub(crate) fn check_inputs(&self, emb: &TrajectoryEmbeddings) -> Result<()> {
        if emb.query.len() != self.d_e {
            return Err(MascError::config(format!("query dimension {} for d_e = {}", emb.query.len(), self.d_e)));
        }
        if let Some(s) = emb.steps.iter().find(|s| s.len() != self.d) {
            return Err(MascError::config(format!("step dimension {} for d = {}", s.len(), self.d)));
        }
        if self.backbone_spec.is_remote() {
            if emb.context_states.len() < emb.steps.len() {
                return Err(MascError::config("remote_llm backbone needs one context state per step"));
            }
            if let Some(s) = emb.context_states.iter().find(|s| s.len() != self.backbone_spec.hidden_dim) {
                return Err(MascError::config(format!(
                    "context state of width {} for hidden_dim {}",
                    s.len(),
                    self.backbone_spec.hidden_dim
                )));
            }
        }
        Ok(())
    }

    /// `q̃ = f_q(q)` and `h̃_j = f_h(h_j)` for the given history.
    pub fn encode_context(&self, q: &EmbeddingVector, hist: &[StepEmbedding]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        encode_with(&self.params, self, q.as_slice(), hist.iter().map(StepEmbedding::as_slice))
    }

    /// `x̂ = f_theta(backbone(q̃, h̃_1..h̃_k))` from the final position.
    pub fn predict_next(&self, q_tilde: &[f64], hist_tilde: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mixer = self.mixer.as_ref().ok_or_else(|| {
            MascError::config("remote_llm backbone predicts from externally computed context states")
        })?;
        if q_tilde.len() != self.d_h || hist_tilde.iter().any(|h| h.len() != self.d_h) {
            return Err(MascError::shape(format!("context vectors must have width d_h = {}", self.d_h)));
        }
        let mut seq: Vec<&[f64]> = Vec::with_capacity(1 + hist_tilde.len());
        seq.push(q_tilde);
        seq.extend(hist_tilde.iter().map(Vec::as_slice));
        let state = mixer.final_state(&seq)?;
        head(&self.params, &state)
    }

    /// Predictions for every step `t = 1..T` of an embedded trajectory.
    pub fn predictions(&self, emb: &TrajectoryEmbeddings) -> Result<Vec<StepPrediction>> {
        predictions_with(&self.params, self, emb)
    }

    /// Attention refresh of the prototype over the predictions `x̂_1..x̂_T`.
    pub fn update_prototype<R: AsRef<[f64]>>(&self, x_hats: &[R]) -> Result<AttentionOutput> {
        update_prototype_with(&self.params, self.d, x_hats)
    }

    /// Per-trajectory objective at the current parameters. The prototype
    /// term is taken against the attention-refreshed prototype.
    pub fn trajectory_loss(&self, emb: &TrajectoryEmbeddings, lambda: f64) -> Result<LossBreakdown> {
        trajectory_loss_with(&self.params, self, emb, lambda)
    }

    /// Objective as a function of arbitrary parameters with this model's
    /// layout; used by the finite-difference oracle.
    pub fn loss_at(&self, params: &Params, emb: &TrajectoryEmbeddings, lambda: f64) -> Result<f64> {
        Ok(trajectory_loss_with(params, self, emb, lambda)?.total)
    }

    /// Scores every step in one causal pass; equivalent to calling
    /// [`detect`] at each `t`.
    pub fn score_trajectory(
        &self,
        emb: &TrajectoryEmbeddings,
        alpha: f64,
        beta: f64,
        delta: f64,
    ) -> Result<Vec<AnomalyVerdict>> {
        check_weights(alpha, beta)?;
        self.predictions(emb)?
            .iter()
            .map(|p| Ok(score_against(self.prototype(), p, alpha, beta).with_threshold(delta)))
            .collect()
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) || (alpha == 0.0 && beta == 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(MascError::precondition("alpha and beta must be finite, non-negative and not both zero"));
    }
    Ok(())
}

pub fn params_digest(params: &Params) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn get<'a>(params: &'a Params, name: &str) -> Result<&'a Matrix> {
    params.get(name).ok_or_else(|| MascError::config(format!("missing parameter {name}")))
}

fn head(params: &Params, state: &[f64]) -> Result<Vec<f64>> {
    linear(get(params, names::F_THETA_W)?, get(params, names::F_THETA_B)?.as_slice(), state)
}

fn encode_with<'a>(
    params: &Params,
    model: &DetectorModel,
    q: &[f64],
    hist: impl Iterator<Item = &'a [f64]>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if model.mixer.is_none() {
        return Err(MascError::config("remote_llm backbone encodes context remotely"));
    }
    if q.len() != model.d_e {
        return Err(MascError::config(format!("query dimension {} for d_e = {}", q.len(), model.d_e)));
    }
    let q_tilde = linear(get(params, names::F_Q_W)?, get(params, names::F_Q_B)?.as_slice(), q)?;
    let (wh, bh) = (get(params, names::F_H_W)?, get(params, names::F_H_B)?);
    let hist_tilde = hist
        .map(|h| {
            if h.len() != model.d {
                return Err(MascError::config(format!("step dimension {} for d = {}", h.len(), model.d)));
            }
            linear(wh, bh.as_slice(), h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((q_tilde, hist_tilde))
}

fn predictions_with(params: &Params, model: &DetectorModel, emb: &TrajectoryEmbeddings) -> Result<Vec<StepPrediction>> {
    model.check_inputs(emb)?;
    let n = emb.steps.len();
    if n == 0 {
        return Err(MascError::precondition("empty trajectory"));
    }
    let states = match &model.mixer {
        Some(mixer) => {
            let (q_tilde, hist_tilde) =
                encode_with(params, model, emb.query.as_slice(), emb.steps[..n - 1].iter().map(StepEmbedding::as_slice))?;
            let mut seq: Vec<&[f64]> = Vec::with_capacity(n);
            seq.push(&q_tilde);
            seq.extend(hist_tilde.iter().map(Vec::as_slice));
            mixer.forward(&seq)?
        }
        None => emb.context_states[..n].to_vec(),
    };
    states
        .iter()
        .zip(&emb.steps)
        .enumerate()
        .map(|(i, (s, h))| Ok(StepPrediction { t: i + 1, x_hat: head(params, s)?, x: h.as_slice().to_vec() }))
        .collect()
}

fn update_prototype_with<R: AsRef<[f64]>>(params: &Params, d: usize, x_hats: &[R]) -> Result<AttentionOutput> {
    if x_hats.is_empty() {
        return Err(MascError::precondition("empty trajectory"));
    }
    attention(
        get(params, names::PROTO)?.as_slice(),
        x_hats,
        x_hats,
        get(params, names::W_Q)?,
        get(params, names::W_K)?,
        get(params, names::W_V)?,
        (d as f64).sqrt(),
    )
}

fn trajectory_loss_with(
    params: &Params,
    model: &DetectorModel,
    emb: &TrajectoryEmbeddings,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(MascError::precondition("lambda must be non-negative"));
    }
    let preds = predictions_with(params, model, emb)?;
    let x_hats: Vec<&[f64]> = preds.iter().map(|p| p.x_hat.as_slice()).collect();
    let prototype = update_prototype_with(params, model.d, &x_hats)?.output;
    let recon = loss_recon(&preds)?;
    let proto = loss_proto(&preds, &prototype)?;
    Ok(LossBreakdown { recon, proto, total: recon + lambda * proto, prototype })
}

/// Mean squared reconstruction error `(1/T) Σ ‖x̂_t − x_t‖²`.
pub fn loss_recon(preds: &[StepPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(MascError::precondition("no predictions"));
    }
    let sum: f64 = preds.iter().map(|p| sq_dist(&p.x_hat, &p.x)).sum();
    Ok(sum / preds.len() as f64)
}

/// Mean prototype misalignment `(1/T) Σ (1 − cos(x̂_t, p))`. A zero-norm
/// prediction counts as cosine 0.
pub fn loss_proto(preds: &[StepPrediction], p: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(MascError::precondition("no predictions"));
    }
    let sum: f64 = preds.iter().map(|pr| misalignment(&pr.x_hat, p, pr.t)).sum();
    Ok(sum / preds.len() as f64)
}

pub fn total_loss(preds: &[StepPrediction], p: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(MascError::precondition("lambda must be non-negative"));
    }
    Ok(loss_recon(preds)? + lambda * loss_proto(preds, p)?)
}

fn misalignment(x_hat: &[f64], p: &[f64], t: usize) -> f64 {
    if x_hat.iter().all(|v| *v == 0.0) {
        warn!("zero-norm prediction at step {t}; cosine taken as 0");
    }
    1.0 - cosine(x_hat, p)
}

fn score_against(p: &[f64], pred: &StepPrediction, alpha: f64, beta: f64) -> AnomalyVerdict {
    let recon_term = sq_dist(&pred.x_hat, &pred.x);
    let proto_term = misalignment(&pred.x_hat, p, pred.t);
    AnomalyVerdict {
        t: pred.t,
        score: alpha * recon_term + beta * proto_term,
        recon_term,
        proto_term,
        alpha,
        beta,
        delta: f64::INFINITY,
        flagged: false,
    }
}

/// Anomaly score of one prediction against the model's stored prototype,
/// before any threshold is applied.
pub fn anomaly_score(model: &DetectorModel, x_hat: &[f64], x: &[f64], alpha: f64, beta: f64) -> Result<AnomalyVerdict> {
    check_weights(alpha, beta)?;
    if x_hat.len() != model.d || x.len() != model.d {
        return Err(MascError::shape(format!("score inputs must have dimension d = {}", model.d)));
    }
    let pred = StepPrediction { t: 0, x_hat: x_hat.to_vec(), x: x.to_vec() };
    Ok(score_against(model.prototype(), &pred, alpha, beta))
}

/// Verdict for step `t` (1-based), reading only steps `1..=t`.
pub fn detect(
    model: &DetectorModel,
    emb: &TrajectoryEmbeddings,
    t: usize,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> Result<AnomalyVerdict> {
    if t == 0 || t > emb.len() {
        return Err(MascError::precondition(format!("step {t} outside 1..={}", emb.len())));
    }
    check_weights(alpha, beta)?;
    let preds = model.predictions(&emb.prefix(t))?;
    let last = preds.last().expect("t >= 1");
    Ok(score_against(model.prototype(), last, alpha, beta).with_threshold(delta))
}
