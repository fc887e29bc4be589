//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly, then [`Tape::backward`] walks
//! the record in reverse. Parameter leaves borrow their values from a
//! [`ParamStore`], so building a tape never copies weights.

use std::borrow::Cow;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a` plus a `1 x cols` row broadcast over every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    BroadcastRows(Var),
    GatherRows(Var, Vec<usize>),
    GatherEntries(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    PairSum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Cow::Borrowed(self.store.get(id)), Op::Leaf, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(Mat::new(ta, false), Mat::new(tb, true), out.data_mut(), 0.0);
        self.push_op(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(&self.value(b).scale(-1.0));
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols());
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::AddConst(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(out, Op::Silu(a), &[a])
    }

    /// Row-wise layer normalization with learned `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push_op(out, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push_op(out, Op::LogSoftmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let ta = self.value(a);
        assert!(start + width <= ta.cols());
        let mut out = Tensor::zeros(ta.rows(), width);
        for r in 0..ta.rows() {
            out.row_mut(r)
                .copy_from_slice(&ta.row(r)[start..start + width]);
        }
        self.push_op(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + tp.cols()].copy_from_slice(tp.row(r));
            }
            offset += tp.cols();
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = ta.shape();
        assert!(rows > 0, "mean over zero rows");
        let mut out = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= rows as f64;
        }
        self.push_op(out, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push_op(out, Op::SumAll(a), &[a])
    }

    /// Repeats a `1 x cols` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows(), 1);
        let mut data = Vec::with_capacity(n * ta.cols());
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        let out = Tensor::from_vec(n, ta.cols(), data);
        self.push_op(out, Op::BroadcastRows(a), &[a])
    }

    /// Embedding lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tt = self.value(table);
        let mut out = Tensor::zeros(indices.len(), tt.cols());
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tt.row(idx));
        }
        self.push_op(out, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    /// Builds a `rows x cols` tensor whose entry `k` is `source.data[flat[k]]`.
    pub fn gather_entries(
        &mut self,
        source: Var,
        flat: Vec<usize>,
        rows: usize,
        cols: usize,
    ) -> Var {
        assert_eq!(flat.len(), rows * cols);
        let ts = self.value(source).data();
        let data = flat.iter().map(|&k| ts[k]).collect();
        let out = Tensor::from_vec(rows, cols, data);
        self.push_op(out, Op::GatherEntries(source, flat), &[source])
    }

    /// `rows x 1` column holding `a[i][cols[i]]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows(), cols.len());
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| ta.get(r, c))
            .collect();
        let out = Tensor::from_vec(cols.len(), 1, data);
        self.push_op(out, Op::PickCols(a, cols.to_vec()), &[a])
    }

    /// For `n` input rows, emits `n(n-1)/2` rows `h_i + h_j` over pairs
    /// `i < j` in row-major upper-triangular order.
    pub fn pair_sum(&mut self, h: Var) -> Var {
        let th = self.value(h);
        let (n, cols) = th.shape();
        let pairs = n * n.saturating_sub(1) / 2;
        let mut out = Tensor::zeros(pairs, cols);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                let (hi, hj) = (th.row(i), th.row(j));
                for (o, (a, b)) in out.row_mut(p).iter_mut().zip(hi.iter().zip(hj)) {
                    *o = a + b;
                }
                p += 1;
            }
        }
        self.push_op(out, Op::PairSum(h), &[h])
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let out = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].take()))
            .collect();
        Gradients::from_parts(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let acc = slot(grads, *a, ta.shape());
                    gemm(Mat::new(g, false), Mat::new(tb, true), acc.data_mut(), 1.0);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let acc = slot(grads, *b, tb.shape());
                    gemm(Mat::new(ta, true), Mat::new(g, false), acc.data_mut(), 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = A·Bᵀ → dA = G · B
                    let acc = slot(grads, *a, ta.shape());
                    gemm(Mat::new(g, false), Mat::new(tb, false), acc.data_mut(), 1.0);
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let acc = slot(grads, *b, tb.shape());
                    gemm(Mat::new(g, true), Mat::new(ta, false), acc.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, -1.0);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g, 1.0);
                if self.wants(*row) {
                    let acc = slot(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (o, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let acc = slot(grads, *a, ta.shape());
                    for ((o, gv), bv) in acc.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, tb.shape());
                    for ((o, gv), av) in acc.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g, *s),
            Op::AddConst(a) => self.accumulate(grads, *a, g, 1.0),
            Op::Silu(a) => {
                let ta = self.value(*a);
                let acc = slot(grads, *a, ta.shape());
                for ((o, gv), x) in acc.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    let s = sigmoid(*x);
                    *o += gv * s * (1.0 + x * (1.0 - s));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let acc = slot(grads, *gain, (1, cols));
                    let a = acc.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            a[c] += g.get(r, c) * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let acc = slot(grads, *bias, (1, cols));
                    let a = acc.data_mut();
                    for r in 0..rows {
                        for (o, v) in a.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let acc = slot(grads, *x, (rows, cols));
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = g.get(r, c) * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let k = inv_std[r] / n;
                        let a = acc.row_mut(r);
                        for c in 0..cols {
                            a[c] += k * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let acc = slot(grads, *a, out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in acc.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let acc = slot(grads, *a, out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in acc.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape();
                let acc = slot(grads, *a, shape);
                for r in 0..g.rows() {
                    for (o, v) in acc.row_mut(r)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape();
                    if self.wants(*p) {
                        let acc = slot(grads, *p, shape);
                        for r in 0..g.rows() {
                            for (o, v) in acc
                                .row_mut(r)
                                .iter_mut()
                                .zip(&g.row(r)[offset..offset + shape.1])
                            {
                                *o += v;
                            }
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::MeanRows(a) => {
                let shape = self.value(*a).shape();
                let acc = slot(grads, *a, shape);
                let inv = 1.0 / shape.0 as f64;
                for r in 0..shape.0 {
                    for (o, v) in acc.row_mut(r).iter_mut().zip(g.data()) {
                        *o += v * inv;
                    }
                }
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape();
                let acc = slot(grads, *a, shape);
                let gv = g.data()[0];
                for o in acc.data_mut() {
                    *o += gv;
                }
            }
            Op::BroadcastRows(a) => {
                let acc = slot(grads, *a, (1, g.cols()));
                for r in 0..g.rows() {
                    for (o, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let shape = self.value(*table).shape();
                let acc = slot(grads, *table, shape);
                for (i, &idx) in indices.iter().enumerate() {
                    for (o, v) in acc.row_mut(idx).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::GatherEntries(source, flat) => {
                let shape = self.value(*source).shape();
                let acc = slot(grads, *source, shape);
                let a = acc.data_mut();
                for (&k, v) in flat.iter().zip(g.data()) {
                    a[k] += v;
                }
            }
            Op::PickCols(a, cols) => {
                let shape = self.value(*a).shape();
                let acc = slot(grads, *a, shape);
                for (r, &c) in cols.iter().enumerate() {
                    let v = acc.get(r, c) + g.get(r, 0);
                    acc.set(r, c, v);
                }
            }
            Op::PairSum(h) => {
                let shape = self.value(*h).shape();
                let acc = slot(grads, *h, shape);
                let n = shape.0;
                let mut p = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        for c in 0..shape.1 {
                            let v = g.get(p, c);
                            acc.data_mut()[i * shape.1 + c] += v;
                            acc.data_mut()[j * shape.1 + c] += v;
                        }
                        p += 1;
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, s: f64) {
        if self.wants(v) {
            slot(grads, v, g.shape()).axpy(s, g);
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
