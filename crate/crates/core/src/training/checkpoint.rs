//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `MASCCKPT`, format version (`u32` LE), header
//! length (`u32` LE), a JSON header, then the payload. The payload holds every
//! learnable parameter as raw little-endian `f64`s, row-major, in the order
//! listed by the header (parameter name order). The header carries the
//! SHA-256 of the payload. Frozen backbone weights are not stored; they are
//! regenerated from the backbone seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Calibration;
use crate::detector::{BackboneSpec, DetectorModel};
use crate::embedding::EmbedderSpec;
use crate::error::{MascError, Result};
use crate::numerics::{Matrix, Params};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MASCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score new traces exactly as at save time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DetectorModel,
    pub embedder: EmbedderSpec,
    pub with_gt: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d_e: usize,
    d_h: usize,
    d: usize,
    embedder: EmbedderSpec,
    backbone: BackboneSpec,
    seed: u64,
    with_gt: bool,
    lambda: f64,
    alpha: f64,
    beta: f64,
    delta: Option<f64>,
    calibration: Option<Calibration>,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> MascError {
    MascError::CorruptCheckpoint(msg.into())
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let mut payload = Vec::with_capacity(m.params().num_scalars() * 8);
    let mut entries = Vec::with_capacity(m.params().len());
    for (name, mat) in m.params().iter() {
        entries.push(ParamEntry { name: name.to_string(), rows: mat.rows(), cols: mat.cols() });
        for v in mat.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        d_e: m.d_e(),
        d_h: m.d_h(),
        d: m.d(),
        embedder: ck.embedder.clone(),
        backbone: m.backbone_spec().clone(),
        seed: m.seed(),
        with_gt: ck.with_gt,
        lambda: ck.lambda,
        alpha: ck.alpha,
        beta: ck.beta,
        delta: ck.calibration.as_ref().map(|c| c.delta),
        calibration: ck.calibration.clone(),
        params: entries,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| MascError::config(format!("checkpoint header: {e}")))?;
    let header_len = u32::try_from(header.len()).map_err(|_| MascError::config("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses checkpoint bytes, verifying version and payload digest before
/// building anything.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing magic or truncated preamble"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(MascError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if payload.len() != expected {
        return Err(corrupt(format!("payload is {} bytes, header describes {expected}", payload.len())));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    let mut params = Params::new();
    let mut off = 0;
    for p in &header.params {
        let n = p.rows * p.cols;
        let data = payload[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += 8 * n;
        params.insert(p.name.clone(), Matrix::new(p.rows, p.cols, data).map_err(|e| corrupt(e.to_string()))?);
    }
    if header.d != 2 * header.d_e {
        return Err(corrupt("header dimensions are inconsistent"));
    }
    let model = DetectorModel::from_parts(header.d_e, header.d_h, header.backbone, header.seed, params)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        model,
        embedder: header.embedder,
        with_gt: header.with_gt,
        lambda: header.lambda,
        alpha: header.alpha,
        beta: header.beta,
        calibration: header.calibration,
    })
}

/// Writes the checkpoint and returns the SHA-256 of the file contents.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::calibrate_scores;

    fn sample() -> Checkpoint {
        let model = DetectorModel::new(3, 5, BackboneSpec::frozen_mixer(4, 2, 8), 21).unwrap();
        Checkpoint {
            model,
            embedder: EmbedderSpec::hashing(3),
            with_gt: false,
            lambda: 0.2,
            alpha: 1.0,
            beta: 1.0,
            calibration: Some(calibrate_scores(&[0.1, 0.35, 0.2, 0.9], 0.99, 1.0, 1.0).unwrap()),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_and_tampering_are_corrupt() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [4, 15, 40, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(MascError::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped), Err(MascError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(MascError::CheckpointVersion { found: 2, expected: 1 })
        ));
    }
}
