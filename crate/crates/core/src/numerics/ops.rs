use super::matrix::{dot, Matrix};
use crate::error::{MascError, Result};

/// `y = W x + b`.
pub fn linear(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(MascError::shape(format!("bias of length {} for {} output rows", b.len(), w.rows())));
    }
    let mut y = w.matvec(x)?;
    y.iter_mut().zip(b).for_each(|(yi, bi)| *yi += bi);
    Ok(y)
}

/// Max-shifted softmax. Panics on an empty input.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Single-head attention for one query row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `softmax((q Wq)(K Wk)^T / scale) (V Wv)` with row-vector conventions:
/// `keys` and `values` hold one context item per row.
pub fn attention<K: AsRef<[f64]>, V: AsRef<[f64]>>(
    query: &[f64],
    keys: &[K],
    values: &[V],
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    scale: f64,
) -> Result<AttentionOutput> {
    if keys.is_empty() || values.is_empty() {
        return Err(MascError::shape("empty attention context"));
    }
    if keys.len() != values.len() {
        return Err(MascError::shape("keys and values differ in row count"));
    }
    if !(scale > 0.0) {
        return Err(MascError::precondition("attention scale must be positive"));
    }
    let qp = wq.vecmat(query)?;
    let logits = keys
        .iter()
        .map(|k| Ok(dot(&qp, &wk.vecmat(k.as_ref())?) / scale))
        .collect::<Result<Vec<f64>>>()?;
    let weights = softmax(&logits);
    let mut output = vec![0.0; wv.cols()];
    for (&w, v) in weights.iter().zip(values) {
        let vp = wv.vecmat(v.as_ref())?;
        output.iter_mut().zip(&vp).for_each(|(o, v)| *o += w * v);
    }
    Ok(AttentionOutput { output, weights })
}
