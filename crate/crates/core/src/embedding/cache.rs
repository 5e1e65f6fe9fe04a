//! Append-only on-disk embedding cache.
//!
//! File layout is a plain concatenation of records:
//!
//! ```text
//! u32 LE  record length in bytes (excluding this prefix) = 32 + 4 + 8 * dim
//! [u8;32] SHA-256(model_name || 0x00 || text)
//! u32 LE  dim
//! f64 LE  * dim
//! ```
//!
//! A torn trailing record (e.g. after a crash) is cut off when the cache is opened.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{MascError, Result};

pub type CacheKey = [u8; 32];

pub fn cache_key(model_name: &str, text: &str) -> CacheKey {
    let mut h = Sha256::new();
    h.update(model_name.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    h.finalize().into()
}

pub struct EmbeddingCache {
    path: PathBuf,
    entries: Mutex<HashMap<CacheKey, Vec<f64>>>,
    writer: Mutex<BufWriter<File>>,
}

impl EmbeddingCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            let valid = load_records(&bytes, &mut entries)?;
            if valid < bytes.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(valid as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(EmbeddingCache {
            path,
            entries: Mutex::new(entries),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<f64>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).get(key).cloned()
    }

    /// Appends a record and flushes it; existing keys are left untouched.
    pub fn insert(&self, key: CacheKey, values: &[f64]) -> Result<()> {
        let mut entries = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        if entries.contains_key(&key) {
            return Ok(());
        }
        let mut rec = Vec::with_capacity(40 + 8 * values.len());
        let body_len = 32 + 4 + 8 * values.len();
        rec.extend_from_slice(&(body_len as u32).to_le_bytes());
        rec.extend_from_slice(&key);
        rec.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        w.write_all(&rec)?;
        w.flush()?;
        entries.insert(key, values.to_vec());
        Ok(())
    }
}

// Returns the byte length of the valid prefix.
fn load_records(bytes: &[u8], entries: &mut HashMap<CacheKey, Vec<f64>>) -> Result<usize> {
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let body = pos + 4;
        if body + len > bytes.len() {
            log::warn!("embedding cache: ignoring torn trailing record at byte {pos}");
            break;
        }
        if len < 36 || (len - 36) % 8 != 0 {
            return Err(MascError::Validation(format!("embedding cache: bad record length {len} at byte {pos}")));
        }
        let key: CacheKey = bytes[body..body + 32].try_into().unwrap();
        let dim = u32::from_le_bytes(bytes[body + 32..body + 36].try_into().unwrap()) as usize;
        if 36 + 8 * dim != len {
            return Err(MascError::Validation(format!("embedding cache: dim/length mismatch at byte {pos}")));
        }
        let values = bytes[body + 36..body + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.entry(key).or_insert(values);
        pos = body + len;
    }
    Ok(pos)
}
