//! Reference feature-hashing embedder.
//!
//! Text is lowercased and split on non-alphanumeric characters. Each token is
//! hashed with FNV-1a (64-bit), seeded by prefixing the dimension as 8
//! little-endian bytes, followed by a murmur3 `fmix64` finalizer. The token
//! adds `+1` or `-1` (top hash bit) into bucket `hash % dim`. The sum is then
//! L2-normalized, so every output has norm exactly 1, or 0 when all
//! contributions cancel or the text has no tokens.

use super::{Embedder, EmbeddingVector};
use crate::error::{MascError, Result};

/// Upper bound on the L2 norm of any hashing embedding.
pub const HASHING_NORM_BOUND: f64 = 1.0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(MascError::config("embedding dimension must be positive"));
        }
        Ok(HashingEmbedder { dim })
    }

    /// Signed bucket for one token: `(bucket, ±1.0)`.
    pub fn token_slot(&self, token: &str) -> (usize, f64) {
        let h = token_hash(token, self.dim);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        (bucket, sign)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

fn token_hash(token: &str, dim: usize) -> u64 {
    let mut h = FNV_OFFSET;
    for b in (dim as u64).to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    fmix64(h)
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(MascError::precondition("cannot embed empty text"));
        }
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let (bucket, sign) = self.token_slot(&token);
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector::new(v)
    }
}
