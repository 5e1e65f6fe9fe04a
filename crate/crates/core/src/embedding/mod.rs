//! Text embeddings for queries, roles and outputs.
//!
//! A step is embedded as `[Embed(role) ; Embed(output)]`, role half first, so a
//! step embedding has twice the embedder dimension.

mod cache;
mod hashing;
mod remote;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheKey, EmbeddingCache};
pub use hashing::{tokenize, HashingEmbedder, HASHING_NORM_BOUND};
pub use remote::RemoteEmbedder;

use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::trace::Trajectory;

/// Finite real vector produced by an embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MascError::Validation("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `h_j = r_j ‖ Embed(O_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbedding(Vec<f64>);

impl StepEmbedding {
    pub fn concat(role: &EmbeddingVector, output: &EmbeddingVector) -> Result<Self> {
        if role.len() != output.len() {
            return Err(MascError::shape("role and output embeddings differ in dimension"));
        }
        let mut v = Vec::with_capacity(role.len() * 2);
        v.extend_from_slice(role.as_slice());
        v.extend_from_slice(output.as_slice());
        Ok(StepEmbedding(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn role_half(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn output_half(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<String>,
}

impl EmbedderSpec {
    pub fn hashing(dimension: usize) -> Self {
        EmbedderSpec { kind: EmbedderKind::Hashing, dimension, endpoint: None, model_name: None, cache_path: None }
    }

    pub fn remote(endpoint: &str, model_name: &str, dimension: usize) -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Remote,
            dimension,
            endpoint: Some(endpoint.to_string()),
            model_name: Some(model_name.to_string()),
            cache_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(MascError::config("embedding dimension must be positive"));
        }
        if self.kind == EmbedderKind::Remote && (self.endpoint.is_none() || self.model_name.is_none()) {
            return Err(MascError::config("remote embedder requires endpoint and model_name"));
        }
        Ok(())
    }

    /// Instantiates the embedder, opening the cache file when one is configured.
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.build_with(HttpOptions::default())
    }

    pub fn build_with(&self, http: HttpOptions) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(self.dimension)?),
            EmbedderKind::Remote => {
                let cache = self.cache_path.as_ref().map(EmbeddingCache::open).transpose()?;
                Box::new(RemoteEmbedder::new(
                    self.endpoint.as_deref().unwrap_or_default(),
                    self.model_name.as_deref().unwrap_or_default(),
                    self.dimension,
                    cache,
                    http,
                )?)
            }
        })
    }
}

/// Contract every embedder satisfies. Implementations are safe for concurrent callers.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// One-shot convenience over [`EmbedderSpec::build`].
pub fn embed_text(spec: &EmbedderSpec, text: &str) -> Result<EmbeddingVector> {
    spec.build()?.embed_text(text)
}

pub fn embed_step(embedder: &dyn Embedder, role: &str, output: &str) -> Result<StepEmbedding> {
    if role.is_empty() || output.is_empty() {
        return Err(MascError::precondition("role and output must be non-empty"));
    }
    let v = embedder.embed_batch(&[role, output])?;
    check_dim(embedder, &v)?;
    StepEmbedding::concat(&v[0], &v[1])
}

/// Embedded form of one trajectory: the query vector plus one `h_t` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEmbeddings {
    pub query: EmbeddingVector,
    pub steps: Vec<StepEmbedding>,
    /// Externally computed backbone states, one per step (entry `t-1` is the
    /// context state used to predict step `t`). Empty unless a text-conditioned
    /// backbone is in use.
    pub context_states: Vec<Vec<f64>>,
}

impl TrajectoryEmbeddings {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Embeddings as seen at step `t`: the first `t` steps (1-based).
    pub fn prefix(&self, t: usize) -> TrajectoryEmbeddings {
        let n = t.min(self.steps.len());
        TrajectoryEmbeddings {
            query: self.query.clone(),
            steps: self.steps[..n].to_vec(),
            context_states: self.context_states.iter().take(n).cloned().collect(),
        }
    }
}

/// Text actually embedded for the query. With `with_gt`, the ground-truth
/// answer (when present) is appended on its own line.
pub fn query_text(t: &Trajectory, with_gt: bool) -> String {
    match (&t.gt_answer, with_gt) {
        (Some(gt), true) => format!("{}\n{}", t.query, gt),
        _ => t.query.clone(),
    }
}

pub fn embed_trajectory(embedder: &dyn Embedder, t: &Trajectory, with_gt: bool) -> Result<TrajectoryEmbeddings> {
    t.validate()?;
    let q = query_text(t, with_gt);
    let mut texts: Vec<&str> = Vec::with_capacity(1 + 2 * t.len());
    texts.push(&q);
    for s in &t.steps {
        texts.push(&s.role);
        texts.push(&s.output);
    }
    let mut vectors = embedder.embed_batch(&texts)?;
    check_dim(embedder, &vectors)?;
    let rest = vectors.split_off(1);
    let query = vectors.pop().expect("query vector");
    let steps = rest
        .chunks_exact(2)
        .map(|pair| StepEmbedding::concat(&pair[0], &pair[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEmbeddings { query, steps, context_states: Vec::new() })
}

fn check_dim(embedder: &dyn Embedder, vs: &[EmbeddingVector]) -> Result<()> {
    match vs.iter().find(|v| v.len() != embedder.dimension()) {
        Some(v) => Err(MascError::config(format!(
            "embedder produced dimension {}, declared {}",
            v.len(),
            embedder.dimension()
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Step;

    fn hashing(d: usize) -> HashingEmbedder {
        HashingEmbedder::new(d).unwrap()
    }

    #[test]
    fn step_halves_match_independent_calls() {
        let e = hashing(16);
        let s = embed_step(&e, "solver", "42").unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(s.role_half(), e.embed_text("solver").unwrap().as_slice());
        assert_eq!(s.output_half(), e.embed_text("42").unwrap().as_slice());
        let same = embed_step(&e, "a", "a").unwrap();
        assert_eq!(same.role_half(), same.output_half());
    }

    #[test]
    fn trajectory_embedding_shapes_and_gt() {
        let e = hashing(8);
        let steps = vec![Step::new("a", "x"), Step::new("b", "y"), Step::new("c", "z")];
        let t = Trajectory::new("t", "what is 2+2", None, steps).unwrap();
        let plain = embed_trajectory(&e, &t, false).unwrap();
        assert_eq!(plain.steps.len(), 3);
        assert_eq!(plain, embed_trajectory(&e, &t, true).unwrap());

        let with_gt = Trajectory { gt_answer: Some("4".into()), ..t };
        let g = embed_trajectory(&e, &with_gt, true).unwrap();
        assert_ne!(g.query, plain.query);
        assert_eq!(g.steps, plain.steps);
    }

    #[test]
    fn remote_spec_requires_endpoint() {
        let mut s = EmbedderSpec::remote("http://localhost:1", "m", 4);
        assert!(s.validate().is_ok());
        s.endpoint = None;
        assert!(matches!(s.validate(), Err(MascError::Config(_))));
    }
}
