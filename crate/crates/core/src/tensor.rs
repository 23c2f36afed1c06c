//! Reverse-mode autodiff over row-major 2-D tensors.
//!
//! Every value lives on a [`Tape`] as a node; ops append nodes and evaluate
//! eagerly. `backward` builds the gradient of a scalar node as *new tape
//! nodes*, so gradients are themselves differentiable — the Wasserstein
//! gradient penalty needs exactly that (a gradient norm inside a loss).
//!
//! The element type is generic: training runs in `f32`, gradient checks
//! rerun the same graph in `f64`.

use std::collections::HashMap;
use std::rc::Rc;

/// Scalar types the tape can compute with.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn powf(self, p: f64) -> Self {
                self.powf(p as $t)
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Handle to a node on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    PowConst(Var, f64),
    SoftmaxRows(Var),
    Transpose(Var),
    SumAll(Var),
    /// n×d → 1×d (collapse the row dimension).
    SumRows(Var),
    /// n×d → n×1 (collapse the column dimension).
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    ConcatRows(Rc<Vec<Var>>),
    ConcatCols(Rc<Vec<Var>>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ZeroPadRows(Var, usize),
    ZeroPadCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    values: Vec<F>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar node with respect to every node that feeds it.
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

/// Append-only computation graph with eager evaluation.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    // (store id, param index) → leaf, so a parameter binds once per tape
    bindings: HashMap<(u64, usize), Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, v: Var) -> &[F] {
        &self.nodes[v.0].values
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].values[0]
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<F>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<F>, needs_grad: bool) -> Var {
        assert_eq!(values.len(), rows * cols, "leaf shape/value mismatch");
        self.push(rows, cols, values, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<F>) -> Var {
        self.leaf(rows, cols, values, false)
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, values: &[f64]) -> Var {
        let v = values.iter().map(|&x| F::from_f64(x)).collect();
        self.leaf(rows, cols, v, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![F::from_f64(x)])
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![F::ZERO; rows * cols])
    }

    pub(crate) fn bind(&mut self, store_id: u64, index: usize, make: impl FnOnce() -> (usize, usize, Vec<F>), needs_grad: bool) -> Var {
        if let Some(&v) = self.bindings.get(&(store_id, index)) {
            assert_eq!(
                self.nodes[v.0].needs_grad, needs_grad,
                "parameter bound twice with different grad modes on one tape"
            );
            return v;
        }
        let (rows, cols, values) = make();
        let v = self.leaf(rows, cols, values, needs_grad);
        self.bindings.insert((store_id, index), v);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (&(u64, usize), &Var)> {
        self.bindings.iter()
    }

    // ---- elementwise / unary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let values = self.zip(a, b, |x, y| x + y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(r, c, values, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "sub shape mismatch");
        let values = self.zip(a, b, |x, y| x - y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(r, c, values, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let values = self.zip(a, b, |x, y| x * y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(r, c, values, Op::Mul(a, b), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let values = self.map(a, |x| -x);
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let kk = F::from_f64(k);
        let values = self.map(a, |x| x * kk);
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let kk = F::from_f64(k);
        let values = self.map(a, |x| x + kk);
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let values = self.map(a, |x| x.exp());
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let values = self.map(a, |x| x.ln());
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::Ln(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let values = self.map(a, |x| x.tanh());
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::Tanh(a), ng)
    }

    /// Elementwise x^p for constant p. Inputs must stay in the domain where
    /// x^p is differentiable (positive values for fractional p).
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let (r, c) = self.shape(a);
        let values = self.map(a, |x| x.powf(p));
        let ng = self.needs_grad(a);
        self.push(r, c, values, Op::PowConst(a, p), ng)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = self.shape(a);
        let (p2, n) = self.shape(b);
        assert_eq!(p, p2, "matmul inner dims {}x{} * {}x{}", m, p, p2, n);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let arow = &av[i * p..(i + 1) * p];
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &bv[k * n..(k + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(m, n, out, Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.needs_grad(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(c >= 1);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mut m = row[0];
            for &x in row {
                m = m.maximum(x);
            }
            let mut s = F::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / s;
            }
        }
        let ng = self.needs_grad(a);
        self.push(r, c, out, Op::SoftmaxRows(a), ng)
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = F::ZERO;
        for &x in &self.nodes[a.0].values {
            s += x;
        }
        let ng = self.needs_grad(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// n×d → 1×d.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        let ng = self.needs_grad(a);
        self.push(1, c, out, Op::SumRows(a), ng)
    }

    /// n×d → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::ZERO; r];
        for i in 0..r {
            let mut s = F::ZERO;
            for j in 0..c {
                s += av[i * c + j];
            }
            out[i] = s;
        }
        let ng = self.needs_grad(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    /// 1×d → n×d.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a 1×d input");
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(av);
        }
        let ng = self.needs_grad(a);
        self.push(n, c, out, Op::BroadcastRows(a), ng)
    }

    /// n×1 → n×d.
    pub fn broadcast_cols(&mut self, a: Var, d: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects an n×1 input");
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * d);
        for i in 0..r {
            for _ in 0..d {
                out.push(av[i]);
            }
        }
        let ng = self.needs_grad(a);
        self.push(r, d, out, Op::BroadcastCols(a), ng)
    }

    /// 1×1 → r×c.
    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1));
        let x = self.nodes[a.0].values[0];
        let ng = self.needs_grad(a);
        self.push(rows, cols, vec![x; rows * cols], Op::BroadcastScalar(a), ng)
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].values);
            ng |= self.needs_grad(p);
        }
        self.push(rows, cols, out, Op::ConcatRows(Rc::new(parts.to_vec())), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols row mismatch");
            cols += c;
            ng |= self.needs_grad(p);
        }
        let mut out = vec![F::ZERO; rows * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pv = &self.nodes[p.0].values;
            for i in 0..rows {
                out[i * cols + off..i * cols + off + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(rows, cols, out, Op::ConcatCols(Rc::new(parts.to_vec())), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        assert!(len >= 1);
        let av = &self.nodes[a.0].values;
        let out = av[start * c..(start + len) * c].to_vec();
        let ng = self.needs_grad(a);
        self.push(len, c, out, Op::SliceRows(a, start, len), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        assert!(len >= 1);
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.needs_grad(a);
        self.push(r, len, out, Op::SliceCols(a, start, len), ng)
    }

    pub fn zero_pad_rows(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![F::ZERO; (before + r + after) * c];
        out[before * c..(before + r) * c].copy_from_slice(&self.nodes[a.0].values);
        let ng = self.needs_grad(a);
        self.push(before + r + after, c, out, Op::ZeroPadRows(a, before), ng)
    }

    pub fn zero_pad_cols(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (r, c) = self.shape(a);
        let nc = before + c + after;
        let mut out = vec![F::ZERO; r * nc];
        let av = &self.nodes[a.0].values;
        for i in 0..r {
            out[i * nc + before..i * nc + before + c].copy_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.needs_grad(a);
        self.push(r, nc, out, Op::ZeroPadCols(a, before), ng)
    }

    /// Row lookup by constant indices (embedding gather).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        assert!(!indices.is_empty());
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            assert!(ix < r, "gather_rows index {} out of {}", ix, r);
            out.extend_from_slice(&av[ix * c..(ix + 1) * c]);
        }
        let ng = self.needs_grad(a);
        self.push(indices.len(), c, out, Op::GatherRows(a, Rc::new(indices.to_vec())), ng)
    }

    /// out[indices[i]] += a[i]; rows without an index stay zero.
    pub fn scatter_add_rows(&mut self, a: Var, indices: &[usize], out_rows: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, indices.len());
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::ZERO; out_rows * c];
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < out_rows);
            for j in 0..c {
                out[ix * c + j] += av[i * c + j];
            }
        }
        let ng = self.needs_grad(a);
        self.push(out_rows, c, out, Op::ScatterAddRows(a, Rc::new(indices.to_vec())), ng)
    }

    // ---- helpers ----

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Vec<F> {
        self.nodes[a.0].values.iter().map(|&x| f(x)).collect()
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ---- backward ----

    /// Builds ∂y/∂(every contributing node) as new tape nodes. `y` must be 1×1.
    /// The returned gradients are ordinary nodes: differentiating through them
    /// (e.g. for a gradient penalty) just means calling `backward` again on a
    /// scalar that consumes them.
    pub fn backward(&mut self, y: Var) -> Gradients {
        assert_eq!(self.shape(y), (1, 1), "backward target must be scalar");
        let upto = y.0;
        let mut grads: Vec<Option<Var>> = vec![None; self.nodes.len()];
        grads[y.0] = Some(self.scalar_const(1.0));

        for i in (0..=upto).rev() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if self.needs_grad(a) {
                        let bt = self.transpose(b);
                        let da = self.matmul(g, bt);
                        self.accumulate(&mut grads, a, da);
                    }
                    if self.needs_grad(b) {
                        let at = self.transpose(a);
                        let db = self.matmul(at, g);
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(&mut grads, a, g);
                    }
                    if self.needs_grad(b) {
                        self.accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(&mut grads, a, g);
                    }
                    if self.needs_grad(b) {
                        let ng = self.neg(g);
                        self.accumulate(&mut grads, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(a) {
                        let da = self.mul(g, b);
                        self.accumulate(&mut grads, a, da);
                    }
                    if self.needs_grad(b) {
                        let db = self.mul(g, a);
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Neg(a) => {
                    let da = self.neg(g);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Scale(a, k) => {
                    let da = self.scale(g, k);
                    self.accumulate(&mut grads, a, da);
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, a, g);
                }
                Op::Exp(a) => {
                    let da = self.mul(g, out);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Ln(a) => {
                    let inv = self.pow_const(a, -1.0);
                    let da = self.mul(g, inv);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - tanh^2
                    let sq = self.mul(out, out);
                    let neg_sq = self.neg(sq);
                    let one_minus = self.add_scalar(neg_sq, 1.0);
                    let da = self.mul(g, one_minus);
                    self.accumulate(&mut grads, a, da);
                }
                Op::PowConst(a, p) => {
                    let lower = self.pow_const(a, p - 1.0);
                    let scaled = self.scale(lower, p);
                    let da = self.mul(g, scaled);
                    self.accumulate(&mut grads, a, da);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y ⊙ (g - rowsum(g ⊙ y))
                    let (_, c) = self.shape(out);
                    let gy = self.mul(g, out);
                    let rs = self.sum_cols(gy);
                    let rsb = self.broadcast_cols(rs, c);
                    let centered = self.sub(g, rsb);
                    let da = self.mul(out, centered);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g);
                    self.accumulate(&mut grads, a, da);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let da = self.broadcast_scalar(g, r, c);
                    self.accumulate(&mut grads, a, da);
                }
                Op::SumRows(a) => {
                    let (r, _) = self.shape(a);
                    let da = self.broadcast_rows(g, r);
                    self.accumulate(&mut grads, a, da);
                }
                Op::SumCols(a) => {
                    let (_, c) = self.shape(a);
                    let da = self.broadcast_cols(g, c);
                    self.accumulate(&mut grads, a, da);
                }
                Op::BroadcastRows(a) => {
                    let da = self.sum_rows(g);
                    self.accumulate(&mut grads, a, da);
                }
                Op::BroadcastCols(a) => {
                    let da = self.sum_cols(g);
                    self.accumulate(&mut grads, a, da);
                }
                Op::BroadcastScalar(a) => {
                    let da = self.sum_all(g);
                    self.accumulate(&mut grads, a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts.iter() {
                        let (r, _) = self.shape(p);
                        if self.needs_grad(p) {
                            let dp = self.slice_rows(g, start, r);
                            self.accumulate(&mut grads, p, dp);
                        }
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts.iter() {
                        let (_, c) = self.shape(p);
                        if self.needs_grad(p) {
                            let dp = self.slice_cols(g, start, c);
                            self.accumulate(&mut grads, p, dp);
                        }
                        start += c;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let (r, _) = self.shape(a);
                    let da = self.zero_pad_rows(g, start, r - start - len);
                    self.accumulate(&mut grads, a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let (_, c) = self.shape(a);
                    let da = self.zero_pad_cols(g, start, c - start - len);
                    self.accumulate(&mut grads, a, da);
                }
                Op::ZeroPadRows(a, before) => {
                    let (r, _) = self.shape(a);
                    let da = self.slice_rows(g, before, r);
                    self.accumulate(&mut grads, a, da);
                }
                Op::ZeroPadCols(a, before) => {
                    let (_, c) = self.shape(a);
                    let da = self.slice_cols(g, before, c);
                    self.accumulate(&mut grads, a, da);
                }
                Op::GatherRows(a, indices) => {
                    let (r, _) = self.shape(a);
                    let da = self.scatter_add_rows(g, &indices, r);
                    self.accumulate(&mut grads, a, da);
                }
                Op::ScatterAddRows(a, indices) => {
                    let da = self.gather_rows(g, &indices);
                    self.accumulate(&mut grads, a, da);
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], target: Var, g: Var) {
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }
}
