//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and bound lazily, once per tape.
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.
//!
//! Shape agreement between primitive operands is an internal invariant and
//! is asserted; user-facing layers validate shapes and return errors first.

use super::params::{ParamId, ParamStore};
use super::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix + broadcast 1×c row
    AddRow(Var, Var),
    /// matrix ⊙ broadcast 1×c row
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// stores per-row 1/σ
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    /// per output cell, the source row that attained the max
    GroupMax(Var, Vec<usize>),
    /// out[e, o] = Σ_i w[e, o·fi + i] · x[e, i]
    EdgeMatVec(Var, Var),
    /// mean of rows sharing a destination; zero for rows with no source
    ScatterMean(Var, Vec<usize>, Vec<usize>),
    /// mean |a − target|
    L1Mean(Var, Matrix),
    SumAll(Vec<Var>),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

static NO_PARAMS: ParamStore = ParamStore::new();

pub struct Tape<'p> {
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape without parameters, for evaluating layers on constant inputs.
    pub fn new() -> Self {
        Tape {
            params: &NO_PARAMS,
            bound: Vec::new(),
            nodes: Vec::new(),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params,
            bound: vec![None; params.len()],
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.params.value(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Values of every softmax node recorded so far (attention maps).
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Matrix> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::SoftmaxRows(_)))
            .map(|n| n.value.get())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let m = self.value(a);
        assert_eq!((1, m.cols), r.shape(), "add_row shape");
        let mut out = m.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let m = self.value(a);
        assert_eq!((1, m.cols), r.shape(), "mul_row shape");
        let mut out = m.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// tanh approximation of GELU
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.rows);
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows, len);
        for i in 0..m.rows {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let out = Matrix {
            rows: len,
            cols: m.cols,
            data: m.data[start * m.cols..(start + len) * m.cols].to_vec(),
        };
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat_cols rows");
                out.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
                off += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows cols");
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * m.cols);
        for _ in 0..n {
            data.extend_from_slice(&m.data);
        }
        let cols = m.cols;
        self.push(Matrix { rows: n, cols, data }, Op::RepeatRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols);
        for i in 0..m.rows {
            for (o, v) in out.data.iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        let n = m.rows.max(1) as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::MeanRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(idx.len(), m.cols);
        for (r, &src) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(m.row(src));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column-wise max over each group of rows; one output row per group.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(groups.len(), m.cols);
        let mut arg = vec![0usize; groups.len() * m.cols];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty pooling group");
            for c in 0..m.cols {
                let mut best = rows[0];
                for &r in &rows[1..] {
                    if m.get(r, c) > m.get(best, c) {
                        best = r;
                    }
                }
                out.set(g, c, m.get(best, c));
                arg[g * m.cols + c] = best;
            }
        }
        self.push(out, Op::GroupMax(a, arg))
    }

    pub fn edge_matvec(&mut self, weights: Var, x: Var) -> Var {
        let w = self.value(weights);
        let xm = self.value(x);
        assert_eq!(w.rows, xm.rows, "edge_matvec rows");
        let fi = xm.cols;
        assert_eq!(w.cols % fi.max(1), 0, "edge_matvec width");
        let fo = w.cols.checked_div(fi).unwrap_or(0);
        let mut out = Matrix::zeros(w.rows, fo);
        for e in 0..w.rows {
            let we = w.row(e);
            let xe = xm.row(e);
            for o in 0..fo {
                out.set(e, o, we[o * fi..(o + 1) * fi].iter().zip(xe).map(|(a, b)| a * b).sum());
            }
        }
        self.push(out, Op::EdgeMatVec(weights, x))
    }

    pub fn scatter_mean(&mut self, a: Var, dst: &[usize], n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, dst.len(), "scatter_mean index length");
        let mut counts = vec![0usize; n];
        let mut out = Matrix::zeros(n, m.cols);
        for (r, &d) in dst.iter().enumerate() {
            counts[d] += 1;
            for (o, v) in out.row_mut(d).iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        for (d, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f64;
                out.row_mut(d).iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push(out, Op::ScatterMean(a, dst.to_vec(), counts))
    }

    pub fn l1_mean(&mut self, a: Var, target: &Matrix) -> Var {
        let m = self.value(a);
        assert_eq!(m.shape(), target.shape(), "l1 target shape");
        let v = m.data.iter().zip(&target.data).map(|(x, t)| (x - t).abs()).sum::<f64>() / m.len() as f64;
        self.push(Matrix::filled(1, 1, v), Op::L1Mean(a, target.clone()))
    }

    /// Sum of 1×1 scalars.
    pub fn sum_all(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().map(|p| self.value(*p).sum()).sum();
        self.push(Matrix::filled(1, 1, v), Op::SumAll(parts.to_vec()))
    }

    /// Adjoints of every recorded node with respect to the 1×1 `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = self.nodes[i].value.get();
            match &self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    // keep leaf adjoints for later queries
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, r.cols);
                    for i in 0..g.rows {
                        for c in 0..g.cols {
                            ga.set(i, c, g.get(i, c) * r.data[c]);
                            gr.data[c] += g.get(i, c) * x.get(i, c);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        let inner = GELU_K * (x + GELU_C * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        gv * d
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for i in 0..g.rows {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for (c, v) in ga.row_mut(i).iter_mut().enumerate() {
                            *v = y[c] * (gy[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let mut ga = g.clone();
                    for (i, s) in inv_std.iter().enumerate() {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let n = y.len() as f64;
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, v) in ga.row_mut(i).iter_mut().enumerate() {
                            *v = s * (gy[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for i in 0..g.rows {
                        ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    ga.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut gp = Matrix::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let rows = self.value(*p).rows;
                        let gp = Matrix {
                            rows,
                            cols: g.cols,
                            data: g.data[off * g.cols..(off + rows) * g.cols].to_vec(),
                        };
                        off += rows;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::RepeatRows(a) => accumulate(&mut grads, *a, column_sums(&g)),
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let n = src.rows.max(1) as f64;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for i in 0..src.rows {
                        for (v, gv) in ga.row_mut(i).iter_mut().zip(&g.data) {
                            *v = gv / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for (r, &s) in idx.iter().enumerate() {
                        for (v, gv) in ga.row_mut(s).iter_mut().zip(g.row(r)) {
                            *v += gv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupMax(a, arg) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for gi in 0..g.rows {
                        for c in 0..g.cols {
                            let r = arg[gi * g.cols + c];
                            ga.data[r * src.cols + c] += g.get(gi, c);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::EdgeMatVec(w, x) => {
                    let wm = self.value(*w);
                    let xm = self.value(*x);
                    let fi = xm.cols;
                    let mut gw = Matrix::zeros(wm.rows, wm.cols);
                    let mut gx = Matrix::zeros(xm.rows, xm.cols);
                    for e in 0..wm.rows {
                        for o in 0..g.cols {
                            let go = g.get(e, o);
                            for i in 0..fi {
                                gw.data[e * wm.cols + o * fi + i] += go * xm.get(e, i);
                                gx.data[e * fi + i] += go * wm.get(e, o * fi + i);
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScatterMean(a, dst, counts) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for (r, &d) in dst.iter().enumerate() {
                        let inv = 1.0 / counts[d] as f64;
                        for (v, gv) in ga.row_mut(r).iter_mut().zip(g.row(d)) {
                            *v = gv * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L1Mean(a, target) => {
                    let src = self.value(*a);
                    let s = g.data[0] / src.len() as f64;
                    let ga = src.zip_map(target, |x, t| {
                        if x > t {
                            s
                        } else if x < t {
                            -s
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(parts) => {
                    for p in parts {
                        let shape = self.shape(*p);
                        accumulate(&mut grads, *p, Matrix::filled(shape.0, shape.1, g.data[0]));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for i in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Adjoints of leaf and parameter nodes after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a leaf variable; zeros if it did not influence the output.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Matrix::zeros(r, c)
        })
    }

    /// Gradients aligned with the tape's parameter store.
    pub fn params(&self, tape: &Tape<'_>) -> Vec<Matrix> {
        tape.params
            .iter()
            .map(|(id, _, value)| match tape.bound[id.index()] {
                Some(v) => self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(value.rows, value.cols)),
                None => Matrix::zeros(value.rows, value.cols),
            })
            .collect()
    }
}
