//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Graphs are built
//! per sample and thrown away; parameters live in a [`ParamStore`] and are
//! copied onto the tape as leaves.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, sqrt};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Named trainable matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data length");
        self.entries.push(ParamEntry { name: name.into(), rows, cols, data });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Replaces all values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> bool {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        {
            return false;
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.data.copy_from_slice(&b.data);
        }
        true
    }
}

/// Gradients laid out like a [`ParamStore`]; untouched parameters stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// In-order elementwise sum; summation order is fixed so results are reproducible.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }

    /// Copy keeping only the listed parameters.
    pub fn restricted_to(&self, ids: &[ParamId]) -> ParamGrads {
        let grads = self
            .grads
            .iter()
            .enumerate()
            .map(|(i, g)| if ids.contains(&i) { g.clone() } else { None })
            .collect();
        ParamGrads { grads }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flatten().flatten().fold(0.0, |m, v| f64::max(m, crate::math::abs(*v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { a: Var, index: Arc<[usize]> },
    MeanRows(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Index value that makes [`Graph::gather`] emit a zero.
pub const PAD: usize = usize::MAX;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = op(a)·op(b) + beta·c` for row-major buffers, where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: strides and extents describe the slices exactly; lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Mse(a, b) => self.needs(*a) || self.needs(*b),
            Op::LayerNorm { a, gain, bias, .. } => self.needs(*a) || self.needs(*gain) || self.needs(*bias),
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Gather { a, .. }
            | Op::MeanRows(a) => self.needs(*a),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar read of non-scalar node");
        n.value[0]
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant data length");
        self.push(rows, cols, value, Op::Leaf)
    }

    /// Copies the value of `v` into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let value = self.nodes[v.0].value.clone();
        self.push(r, c, value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let e = store.get(id);
        self.push(e.rows, e.cols, e.data.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = vec![0.0; m * n];
        gemm(&self.nodes[a.0].value, ar, ac, ta, &self.nodes[b.0].value, br, bc, tb, &mut out, 0.0);
        self.push(m, n, out, Op::MatMul { a, b, ta, tb })
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape");
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| f(*x, *y)).collect();
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "broadcast row shape");
        let rv = &self.nodes[row.0].value;
        let out = self.nodes[a.0].value.chunks(c.max(1)).flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q)).collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x * sigmoid(x)).collect();
        self.push(r, c, out, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    /// Row-wise layer normalization with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(gain), (1, c), "layer norm gain");
        assert_eq!(self.shape(bias), (1, c), "layer norm bias");
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / sqrt(var + EPS);
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(r, c, out, Op::LayerNorm { a, gain, bias, xhat, rstd })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = exp(*v - m);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "column slice out of range");
        let v = &self.nodes[a.0].value;
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(r, len, out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        assert!(parts.iter().all(|p| self.shape(*p).0 == r), "concat_cols row counts");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "row slice out of range");
        let out = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        assert!(parts.iter().all(|p| self.shape(*p).1 == c), "concat_rows widths");
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += self.shape(*p).0;
        }
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()))
    }

    /// `out[i] = a.flat[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let v = &self.nodes[a.0].value;
        let out = index.iter().map(|&i| if i == PAD { 0.0 } else { v[i] }).collect();
        self.push(rows, cols, out, Op::Gather { a, index })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for row in self.nodes[a.0].value.chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Mean squared difference as a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shapes");
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(1, 1, vec![s], Op::Mse(a, b))
    }

    /// Mean softmax cross-entropy of `logits` rows against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(labels.len(), r, "one label per row");
        let mut probs = self.nodes[logits.0].value.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = exp(*v - m);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            loss -= crate::math::ln(row[y].max(1e-300));
        }
        let loss = loss / r.max(1) as f64;
        self.push(1, 1, vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, root: Var, store_len: usize) -> ParamGrads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = ParamGrads { grads: vec![None; store_len] };

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul { a, b, ta, tb } => {
                    let (ar, ac) = self.shape(*a);
                    let (br, bc) = self.shape(*b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.needs(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        if *ta {
                            gemm(bv, br, bc, *tb, &g, rows, cols, true, ga, 1.0);
                        } else {
                            gemm(&g, rows, cols, false, bv, br, bc, !*tb, ga, 1.0);
                        }
                    }
                    if self.needs(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        if *tb {
                            gemm(&g, rows, cols, true, av, ar, ac, *ta, gb, 1.0);
                        } else {
                            gemm(av, ar, ac, !*ta, &g, rows, cols, false, gb, 1.0);
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.iter().copied());
                    self.acc(&mut grads, *b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.iter().copied());
                    self.acc(&mut grads, *b, g.iter().map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    self.acc(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y));
                    self.acc(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y));
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, g.iter().copied());
                    if self.needs(*row) {
                        let mut acc = vec![0.0; cols];
                        for r in g.chunks(cols) {
                            acc.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                        }
                        self.acc(&mut grads, *row, acc.into_iter());
                    }
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, g.iter().map(|v| v * s)),
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    self.acc(
                        &mut grads,
                        *a,
                        g.iter().zip(x).map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        }),
                    );
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    self.acc(&mut grads, *a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }));
                }
                Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                    let gv = &self.nodes[gain.0].value;
                    if self.needs(*gain) {
                        let mut acc = vec![0.0; cols];
                        for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            acc.iter_mut().zip(gr.iter().zip(hr)).for_each(|(s, (d, h))| *s += d * h);
                        }
                        self.acc(&mut grads, *gain, acc.into_iter());
                    }
                    if self.needs(*bias) {
                        let mut acc = vec![0.0; cols];
                        for gr in g.chunks(cols) {
                            acc.iter_mut().zip(gr).for_each(|(s, d)| *s += d);
                        }
                        self.acc(&mut grads, *bias, acc.into_iter());
                    }
                    if self.needs(*a) {
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let hr = &xhat[r * cols..(r + 1) * cols];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..cols {
                                let d = gr[j] * gv[j];
                                mean_d += d;
                                mean_dh += d * hr[j];
                            }
                            mean_d /= cols as f64;
                            mean_dh /= cols as f64;
                            for j in 0..cols {
                                let d = gr[j] * gv[j];
                                dx[r * cols + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                            }
                        }
                        self.acc(&mut grads, *a, dx.into_iter());
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, dx.into_iter());
                }
                Op::SliceCols { a, start } => {
                    let ac = self.shape(*a).1;
                    let ga = self.grad_slot(&mut grads, *a);
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * ac + start + j] += g[r * cols + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.needs(*p) {
                            let gp = self.grad_slot(&mut grads, *p);
                            for r in 0..rows {
                                for j in 0..w {
                                    gp[r * w + j] += g[r * cols + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { a, start } => {
                    let ga = self.grad_slot(&mut grads, *a);
                    ga[start * cols..(start + rows) * cols].iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.needs(*p) {
                            self.acc(&mut grads, *p, g[offset..offset + n].iter().copied());
                        }
                        offset += n;
                    }
                }
                Op::Gather { a, index } => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for (gi, &src) in g.iter().zip(index.iter()) {
                        if src != PAD {
                            ga[src] += gi;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let ar = self.shape(*a).0;
                    let inv = 1.0 / ar as f64;
                    self.acc(&mut grads, *a, (0..ar).flat_map(|_| g.iter().map(move |v| v * inv)));
                }
                Op::Mse(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let k = 2.0 * g[0] / av.len().max(1) as f64;
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, av.iter().zip(bv).map(|(x, y)| k * (x - y)));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, av.iter().zip(bv).map(|(x, y)| -k * (x - y)));
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.shape(*logits).1;
                    let k = g[0] / labels.len().max(1) as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * k).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dx[r * c + y] -= k;
                    }
                    self.acc(&mut grads, *logits, dx.into_iter());
                }
            }
        }
        out
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if !self.needs(v) {
            return;
        }
        let slot = self.grad_slot(grads, v);
        slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
}
