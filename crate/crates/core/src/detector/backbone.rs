//! Frozen sequence backbones.
//!
//! `frozen_mixer` is an in-process causal encoder whose weights are drawn once
//! from a seed and never trained. Block `l` maps a sequence `z_1..z_n` to
//! `u_i = tanh(A_l [mean(z_1..z_i); z_i])`; the last block's final position is
//! the context state.
//!
//! `remote_llm` delegates the context state to an external service: the
//! rendered text of the query and history is sent over the embedding contract
//! and the returned vector is used as the hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{query_text, Embedder, RemoteEmbedder};
use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::numerics::{Matrix, Tape, Var};
use crate::trace::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    FrozenMixer,
    RemoteLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::frozen_mixer(64, 2, 0)
    }
}

impl BackboneSpec {
    pub fn frozen_mixer(hidden_dim: usize, layers: usize, seed: u64) -> Self {
        BackboneSpec { kind: BackboneKind::FrozenMixer, hidden_dim, layers, seed, endpoint: None, model_name: None }
    }

    pub fn remote_llm(endpoint: &str, model_name: &str, hidden_dim: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::RemoteLlm,
            hidden_dim,
            layers: 1,
            seed: 0,
            endpoint: Some(endpoint.to_string()),
            model_name: Some(model_name.to_string()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 {
            return Err(MascError::config("backbone hidden_dim and layers must be positive"));
        }
        if self.kind == BackboneKind::RemoteLlm && (self.endpoint.is_none() || self.model_name.is_none()) {
            return Err(MascError::config("remote_llm backbone requires endpoint and model_name"));
        }
        Ok(())
    }

    pub fn is_remote(&self) -> bool {
        self.kind == BackboneKind::RemoteLlm
    }
}

/// Seeded, frozen stack of mixing blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMixer {
    input_dim: usize,
    hidden_dim: usize,
    blocks: Vec<Matrix>,
}

impl FrozenMixer {
    pub fn new(spec: &BackboneSpec, input_dim: usize) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(MascError::config("backbone input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut blocks = Vec::with_capacity(spec.layers);
        let mut width = input_dim;
        for _ in 0..spec.layers {
            let fan_in = 2 * width;
            let bound = (3.0 / fan_in as f64).sqrt();
            blocks.push(Matrix::uniform(spec.hidden_dim, fan_in, bound, &mut rng));
            width = spec.hidden_dim;
        }
        Ok(FrozenMixer { input_dim, hidden_dim: spec.hidden_dim, blocks })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    /// Last-block output at every position. Position `i` depends only on
    /// inputs `0..=i`.
    pub fn forward<S: AsRef<[f64]>>(&self, seq: &[S]) -> Result<Vec<Vec<f64>>> {
        if seq.is_empty() {
            return Err(MascError::shape("backbone input sequence is empty"));
        }
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(seq.len());
        for z in seq {
            let z = z.as_ref();
            if z.len() != self.input_dim {
                return Err(MascError::shape(format!("backbone expects width {}, got {}", self.input_dim, z.len())));
            }
            cur.push(z.to_vec());
        }
        for a in &self.blocks {
            let width = cur[0].len();
            let mut running = vec![0.0; width];
            let mut next = Vec::with_capacity(cur.len());
            let mut input = vec![0.0; 2 * width];
            for (i, z) in cur.iter().enumerate() {
                running.iter_mut().zip(z).for_each(|(r, v)| *r += v);
                let n = (i + 1) as f64;
                for (dst, r) in input[..width].iter_mut().zip(&running) {
                    *dst = r / n;
                }
                input[width..].copy_from_slice(z);
                let mut u = a.matvec(&input)?;
                u.iter_mut().for_each(|v| *v = v.tanh());
                next.push(u);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Context state for the whole sequence: the final position's output.
    pub fn final_state<S: AsRef<[f64]>>(&self, seq: &[S]) -> Result<Vec<f64>> {
        Ok(self.forward(seq)?.pop().expect("non-empty sequence"))
    }

    /// Same computation recorded on a tape. The block weights enter as
    /// constants, so they never receive adjoints.
    pub fn forward_tape(&self, tape: &mut Tape, seq: &[Var]) -> Vec<Var> {
        let mut cur = seq.to_vec();
        for a in &self.blocks {
            let am = tape.matrix(a.as_slice().to_vec(), a.rows(), a.cols(), false);
            let mut next = Vec::with_capacity(cur.len());
            let mut prefix_sum: Option<Var> = None;
            for (i, &z) in cur.iter().enumerate() {
                let s = match prefix_sum {
                    None => z,
                    Some(prev) => tape.add(prev, z),
                };
                prefix_sum = Some(s);
                let m = tape.scale(s, 1.0 / (i + 1) as f64);
                let input = tape.concat(&[m, z]);
                let pre = tape.matvec(am, input);
                next.push(tape.tanh(pre));
            }
            cur = next;
        }
        cur
    }

    /// SHA-256 over the frozen weights, used to assert they never change.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.blocks {
            h.update((a.rows() as u64).to_le_bytes());
            h.update((a.cols() as u64).to_le_bytes());
            for v in a.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Text sent to a remote backbone for the context preceding step `t`.
pub fn render_context(trajectory: &Trajectory, t: usize, with_gt: bool) -> String {
    let mut out = format!("Query: {}", query_text(trajectory, with_gt));
    for s in trajectory.steps.iter().take(t.saturating_sub(1)) {
        out.push('\n');
        out.push_str(&s.role);
        out.push_str(": ");
        out.push_str(&s.output);
    }
    out
}

/// Fetches one context state per step from a remote backbone.
pub fn remote_context_states(
    spec: &BackboneSpec,
    trajectory: &Trajectory,
    with_gt: bool,
    http: HttpOptions,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let (Some(endpoint), Some(model)) = (&spec.endpoint, &spec.model_name) else {
        return Err(MascError::config("remote_llm backbone requires endpoint and model_name"));
    };
    let client = RemoteEmbedder::new(endpoint, model, spec.hidden_dim, None, http)?;
    let texts: Vec<String> = (1..=trajectory.len()).map(|t| render_context(trajectory, t, with_gt)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Ok(client.embed_batch(&refs)?.into_iter().map(|v| v.into_inner()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, dim: usize, salt: f64) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..dim).map(|j| ((i * 7 + j) as f64 * 0.37 + salt).sin()).collect()).collect()
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let spec = BackboneSpec::frozen_mixer(8, 2, 11);
        let a = FrozenMixer::new(&spec, 5).unwrap();
        let b = FrozenMixer::new(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = FrozenMixer::new(&BackboneSpec::frozen_mixer(8, 2, 12), 5).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn forward_is_causal() {
        let m = FrozenMixer::new(&BackboneSpec::frozen_mixer(6, 2, 3), 4).unwrap();
        let s = seq(5, 4, 0.1);
        let full = m.forward(&s).unwrap();
        for i in 0..5 {
            let part = m.forward(&s[..=i]).unwrap();
            assert_eq!(part[i], full[i]);
        }
    }

    #[test]
    fn tape_matches_plain_forward() {
        let m = FrozenMixer::new(&BackboneSpec::frozen_mixer(6, 3, 9), 4).unwrap();
        let s = seq(4, 4, 0.7);
        let plain = m.forward(&s).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = s.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let outs = m.forward_tape(&mut tape, &vars);
        for (o, p) in outs.iter().zip(&plain) {
            for (a, b) in tape.value(*o).iter().zip(p) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn order_matters() {
        let m = FrozenMixer::new(&BackboneSpec::frozen_mixer(6, 2, 1), 4).unwrap();
        let s = seq(3, 4, 0.2);
        let mut r = s.clone();
        r.swap(0, 2);
        assert_ne!(m.final_state(&s).unwrap(), m.final_state(&r).unwrap());
    }

    #[test]
    fn remote_requires_endpoint() {
        let mut spec = BackboneSpec::remote_llm("http://localhost:1", "m", 8);
        spec.endpoint = None;
        assert!(matches!(spec.validate(), Err(MascError::Config(_))));
    }

    #[test]
    fn context_text_covers_prefix_only() {
        let t = Trajectory::new(
            "a",
            "q",
            None,
            vec![crate::trace::Step::new("x", "one"), crate::trace::Step::new("y", "two")],
        )
        .unwrap();
        assert_eq!(render_context(&t, 1, false), "Query: q");
        assert_eq!(render_context(&t, 2, false), "Query: q\nx: one");
    }
}
