use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::tape::{MatVar, Tape, Var};
use crate::error::{MascError, Result};

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: BTreeMap<String, Matrix>,
}

/// Gradients share the parameter container: same names, same shapes.
pub type Gradients = Params;

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            entries: self.entries.iter().map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols()))).collect(),
        }
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Matrix::is_finite)
    }
}

/// Tape handles for every parameter registered by [`grad`].
pub struct ParamVars {
    vars: BTreeMap<String, MatVar>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<MatVar> {
        self.vars.get(name).copied().ok_or_else(|| MascError::config(format!("unknown parameter {name:?}")))
    }

    /// Column-vector parameter as a plain vector node.
    pub fn vector(&self, name: &str) -> Result<Var> {
        Ok(self.get(name)?.var)
    }

    /// Registers every parameter of `params` on `tape` as a trainable leaf.
    pub fn register(tape: &mut Tape, params: &Params) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, m)| (name.to_string(), tape.matrix(m.as_slice().to_vec(), m.rows(), m.cols(), true)))
            .collect();
        ParamVars { vars }
    }

    /// Collects parameter adjoints into a [`Gradients`] container; parameters
    /// the loss does not touch get zero gradients.
    pub fn collect(&self, params: &Params, adj: &super::tape::Adjoints) -> Gradients {
        let mut out = Params::new();
        for (name, m) in params.iter() {
            let mv = self.vars[name];
            let g = adj.get(mv.var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.len()]);
            out.insert(name, Matrix::new(m.rows(), m.cols(), g).unwrap_or_else(|_| Matrix::zeros(m.rows(), m.cols())));
        }
        out
    }
}

/// Exact reverse-mode gradient of the scalar built by `build`.
pub fn grad<F>(params: &Params, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let loss = build(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(MascError::Diverged(format!("non-finite loss {value}")));
    }
    let adj = tape.backward(loss);
    let grads = vars.collect(params, &adj);
    if !grads.all_finite() {
        return Err(MascError::Diverged("non-finite gradient".into()));
    }
    Ok((value, grads))
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, one scalar parameter at a time.
pub fn finite_diff<F>(params: &Params, f: F, eps: f64) -> Result<Gradients>
where
    F: Fn(&Params) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(MascError::precondition("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, Matrix::len);
        for i in 0..n {
            let orig = params.get(name).unwrap().as_slice()[i];
            work.get_mut(name).unwrap().as_mut_slice()[i] = orig + eps;
            let up = f(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[i] = orig - eps;
            let down = f(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[i] = orig;
            out.get_mut(name).unwrap().as_mut_slice()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for ((_, ma), (_, mb)) in a.iter().zip(b.iter()) {
        for (&x, &y) in ma.as_slice().iter().zip(mb.as_slice()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, values: Vec<f64>) -> Params {
        let mut p = Params::new();
        p.insert(name, Matrix::column(values).unwrap());
        p
    }

    #[test]
    fn finite_diff_of_square() {
        let p = single("x", vec![3.0]);
        let g = finite_diff(&p, |q| Ok(q.get("x").unwrap().as_slice()[0].powi(2)), 1e-4).unwrap();
        assert!((g.get("x").unwrap().as_slice()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let p = single("x", vec![0.3, -1.2, 4.0]);
        let g = finite_diff(&p, |_| Ok(2.5), 1e-4).unwrap();
        assert!(g.get("x").unwrap().as_slice().iter().all(|v| v.abs() <= 1e-10));
    }

    // For a quadratic form central differences are exact up to rounding.
    #[test]
    fn quadratic_form_matches_reverse_mode() {
        let a = Matrix::new(3, 3, vec![2.0, 0.5, -0.3, 0.5, 1.5, 0.2, -0.3, 0.2, 3.0]).unwrap();
        let p = single("x", vec![0.4, -0.9, 1.3]);
        let (_, g) = grad(&p, |t, v| {
            let x = v.vector("x")?;
            let am = t.matrix(a.as_slice().to_vec(), 3, 3, false);
            let ax = t.matvec(am, x);
            Ok(t.dot(x, ax))
        })
        .unwrap();
        let fd = finite_diff(
            &p,
            |q| {
                let x = q.get("x").unwrap().as_slice();
                Ok(super::super::matrix::dot(x, &a.matvec(x).unwrap()))
            },
            1e-4,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-9);
    }
}
