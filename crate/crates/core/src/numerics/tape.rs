//! Reverse-mode differentiation over a fixed set of vector operations.
//!
//! Every node holds a flat `Vec<f64>`; scalars are length-1 vectors and
//! matrices are row-major with their shape carried by the consuming op.
//! Nodes only receive adjoints when they (transitively) depend on a leaf that
//! was created with `requires_grad`, so frozen weights cost nothing on the
//! backward pass.

use super::matrix::{dot, matvec_raw, norm, vecmat_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A matrix-valued node together with its shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVar {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    VecMat { x: Var, w: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    Tanh(Var),
    Dot(Var, Var),
    Affine { x: Var, scale: f64 },
    MulScalar { v: Var, s: Var },
    Softmax(Var),
    Index { v: Var, i: usize },
    SqDist(Var, Var),
    Cosine(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        val[0]
    }

    pub fn leaf(&mut self, value: Vec<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn matrix(&mut self, data: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> MatVar {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        MatVar { var: self.leaf(data, requires_grad), rows, cols }
    }

    /// `W x`.
    pub fn matvec(&mut self, w: MatVar, x: Var) -> Var {
        assert_eq!(self.value(x).len(), w.cols, "matvec shape mismatch");
        let y = matvec_raw(self.value(w.var), w.rows, w.cols, self.value(x));
        let rg = self.rg(w.var) || self.rg(x);
        self.push(y, Op::MatVec { w: w.var, x, rows: w.rows, cols: w.cols }, rg)
    }

    /// `W x + b`.
    pub fn affine_map(&mut self, w: MatVar, b: Var, x: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    /// `x W` for a row vector `x`.
    pub fn vecmat(&mut self, x: Var, w: MatVar) -> Var {
        assert_eq!(self.value(x).len(), w.rows, "vecmat shape mismatch");
        let y = vecmat_raw(self.value(w.var), w.rows, w.cols, self.value(x));
        let rg = self.rg(w.var) || self.rg(x);
        self.push(y, Op::VecMat { x, w: w.var, rows: w.rows, cols: w.cols }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add shape mismatch");
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let y = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y, Op::Concat(parts.to_vec()), rg)
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let y = self.elementwise_sum(parts);
        let n = parts.len() as f64;
        let y = y.into_iter().map(|v| v / n).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y, Op::Mean(parts.to_vec()), rg)
    }

    /// Elementwise sum of equally sized vectors.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let y = self.elementwise_sum(parts);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y, Op::Sum(parts.to_vec()), rg)
    }

    fn elementwise_sum(&self, parts: &[Var]) -> Vec<f64> {
        assert!(!parts.is_empty(), "reduction over no inputs");
        let len = self.value(parts[0]).len();
        let mut y = vec![0.0; len];
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.len(), len, "reduction shape mismatch");
            y.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        y
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(y, Op::Tanh(x), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "dot shape mismatch");
        let y = dot(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![y], Op::Dot(a, b), rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(y, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Vector times a scalar node.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let y = self.value(v).iter().map(|x| x * sv).collect();
        let rg = self.rg(v) || self.rg(s);
        self.push(y, Op::MulScalar { v, s }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = super::ops::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Softmax(x), rg)
    }

    pub fn index(&mut self, v: Var, i: usize) -> Var {
        let y = vec![self.value(v)[i]];
        let rg = self.rg(v);
        self.push(y, Op::Index { v, i }, rg)
    }

    /// `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "sq_dist shape mismatch");
        let y = super::matrix::sq_dist(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![y], Op::SqDist(a, b), rg)
    }

    /// Cosine similarity; 0 with zero gradient when either side has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "cosine shape mismatch");
        let y = super::matrix::cosine(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![y], Op::Cosine(a, b), rg)
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Adjoints {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Adjoints { adj }
    }

    fn propagate(&self, op: &Op, y: &[f64], g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatVec { w, x, rows, cols } => {
                let wv = self.value(w);
                let xv = self.value(x);
                if self.rg(w) {
                    let dw = slot(adj, w, rows * cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (d, &xc) in dw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *d += gr * xc;
                            }
                        }
                    }
                }
                if self.rg(x) {
                    let dx = slot(adj, x, cols);
                    for (r, &gr) in g.iter().enumerate() {
                        for (d, &wrc) in dx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *d += gr * wrc;
                        }
                    }
                }
            }
            Op::VecMat { x, w, rows, cols } => {
                let wv = self.value(w);
                let xv = self.value(x);
                if self.rg(w) {
                    let dw = slot(adj, w, rows * cols);
                    for (r, &xr) in xv.iter().enumerate() {
                        for (d, &gc) in dw[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *d += xr * gc;
                        }
                    }
                }
                if self.rg(x) {
                    let dx = slot(adj, x, rows);
                    for (r, d) in dx.iter_mut().enumerate() {
                        *d += dot(&wv[r * cols..(r + 1) * cols], g);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        add_into(slot(adj, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        add_into(slot(adj, p, n), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::Mean(ref parts) => {
                let k = 1.0 / parts.len() as f64;
                for &p in parts {
                    if self.rg(p) {
                        add_into(slot(adj, p, g.len()), g, k);
                    }
                }
            }
            Op::Sum(ref parts) => {
                for &p in parts {
                    if self.rg(p) {
                        add_into(slot(adj, p, g.len()), g, 1.0);
                    }
                }
            }
            Op::Tanh(x) => {
                let dx = slot(adj, x, g.len());
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(a).to_vec(), self.value(b).to_vec());
                if self.rg(a) {
                    add_into(slot(adj, a, av.len()), &bv, g[0]);
                }
                if self.rg(b) {
                    add_into(slot(adj, b, bv.len()), &av, g[0]);
                }
            }
            Op::Affine { x, scale, .. } => add_into(slot(adj, x, g.len()), g, scale),
            Op::MulScalar { v, s } => {
                let sv = self.scalar(s);
                let vv = self.value(v);
                let ds = dot(g, vv);
                if self.rg(v) {
                    add_into(slot(adj, v, g.len()), g, sv);
                }
                if self.rg(s) {
                    slot(adj, s, 1)[0] += ds;
                }
            }
            Op::Softmax(x) => {
                let gy = dot(g, y);
                let dx = slot(adj, x, g.len());
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += yi * (gi - gy);
                }
            }
            Op::Index { v, i } => {
                let n = self.value(v).len();
                slot(adj, v, n)[i] += g[0];
            }
            Op::SqDist(a, b) => {
                let diff: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
                if self.rg(a) {
                    add_into(slot(adj, a, diff.len()), &diff, 2.0 * g[0]);
                }
                if self.rg(b) {
                    add_into(slot(adj, b, diff.len()), &diff, -2.0 * g[0]);
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (na, nb) = (norm(av), norm(bv));
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = y[0];
                // d cos / da = b / (|a||b|) − cos · a / |a|²
                let ga: Vec<f64> = av.iter().zip(bv).map(|(x, z)| z / (na * nb) - c * x / (na * na)).collect();
                let gb: Vec<f64> = av.iter().zip(bv).map(|(x, z)| x / (na * nb) - c * z / (nb * nb)).collect();
                if self.rg(a) {
                    add_into(slot(adj, a, ga.len()), &ga, g[0]);
                }
                if self.rg(b) {
                    add_into(slot(adj, b, gb.len()), &gb, g[0]);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}
