// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over whole-matrix primitives.
//!
//! A [`Tape`] records every primitive in creation order, so the node list is
//! already a topological order. Forward values are computed eagerly when a
//! node is pushed; [`Tape::backward`] walks the list in reverse and returns
//! gradients for trainable leaves only.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::matrix::{gemm_acc, inv_rms, softmax_in_place, Matrix};
use crate::error::{contract, shape_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Sum(Var),
    RmsNormRows {
        x: Var,
        gamma: Var,
        inv: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<Vec<f64>>,
    },
    OverrideRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar loss with respect to trainable leaves.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Matrix)> {
        self.grads.iter()
    }
}

/// Single-owner record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Matrix, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a * b^T`; weights stored as `out x in` are applied to row inputs this way.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), value, &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), value, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    /// Row-wise RMS normalisation with a `1 x cols` gain.
    pub fn rmsnorm_rows(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(shape_err!(
                "rmsnorm gain {}x{} for input width {}",
                gv.rows(),
                gv.cols(),
                xv.cols()
            ));
        }
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let s = inv_rms(xv.row(r), eps)?;
            inv.push(s);
            for (o, g) in out.row_mut(r).iter_mut().zip(gv.data()) {
                *o *= g * s;
            }
        }
        Ok(self.push(Op::RmsNormRows { x, gamma, inv }, out, &[x, gamma]))
    }

    /// Stacks `table[ids[i]]` as row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(shape_err!(
                    "gather row {id} from table of {} rows",
                    tv.rows()
                ));
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N x d` with heads laid out as contiguous column
    /// blocks. Each `segments` range is an independent sequence; positions
    /// attend only to themselves and earlier positions of their own segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        if kv.shape() != (n, d) || vv.shape() != (n, d) {
            return Err(shape_err!("attention q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract!("width {d} not divisible into {heads} heads"));
        }
        if segments.iter().any(|s| s.end > n || s.start > s.end) {
            return Err(contract!("attention segment outside {n} rows"));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![0.0; len * len];
                for t in 0..len {
                    let qt = &qv.row(seg.start + t)[cols.clone()];
                    let row = &mut p[t * len..t * len + t + 1];
                    for (s, slot) in row.iter_mut().enumerate() {
                        let ks = &kv.row(seg.start + s)[cols.clone()];
                        *slot = dot(qt, ks) * scale;
                    }
                    softmax_in_place(row);
                    let orow = &mut out.row_mut(seg.start + t)[cols.clone()];
                    for (s, &w) in row.iter().enumerate() {
                        let vs = &vv.row(seg.start + s)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vs) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            out,
            &[q, k, v],
        ))
    }

    /// Replaces the listed rows of `x` with fixed vectors. Gradient does not
    /// flow into the replaced rows.
    pub fn override_rows(&mut self, x: Var, rows: &[(usize, &[f64])]) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut idx = Vec::with_capacity(rows.len());
        for &(r, vals) in rows {
            if r >= out.rows() || vals.len() != out.cols() {
                return Err(shape_err!(
                    "override row {r} of {}x{} with {} values",
                    out.rows(),
                    out.cols(),
                    vals.len()
                ));
            }
            out.row_mut(r).copy_from_slice(vals);
            idx.push(r);
        }
        Ok(self.push(Op::OverrideRows { x, rows: idx }, out, &[x]))
    }

    /// Mean negative log-likelihood of `targets = [(row, class)]` under the
    /// row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return Err(contract!("cross-entropy over zero targets"));
        }
        let mut probs = Vec::with_capacity(targets.len());
        let mut nll = 0.0;
        for &(r, c) in targets {
            if r >= lv.rows() || c >= lv.cols() {
                return Err(shape_err!(
                    "target ({r}, {c}) outside logits {:?}",
                    lv.shape()
                ));
            }
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            nll -= libm::log(p[c]);
            probs.push(p);
        }
        let value = Matrix::scalar(nll / targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(contract!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            ));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if node.trainable {
                out.grads.insert(Var(idx), g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let mut da = Matrix::zeros(g.rows(), self.value(*b).cols());
                    gemm_acc(g, self.value(*b), &mut da);
                    Self::accumulate(grads, *a, da)?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, f) => Self::accumulate(grads, *a, g.scale(*f))?,
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                Self::accumulate(grads, *a, g.hadamard(&d)?)?;
            }
            Op::Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y);
                Self::accumulate(grads, *a, g.hadamard(&d)?)?;
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dotp = dot(pr, gr);
                    for ((o, &pi), &gi) in dx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pi * (gi - dotp);
                    }
                }
                Self::accumulate(grads, *a, dx)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                Self::accumulate(grads, *a, Matrix::filled(r, c, g.as_scalar()?))?;
            }
            Op::RmsNormRows { x, gamma, inv } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let n = xv.cols() as f64;
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let (xr, gr, s) = (xv.row(r), g.row(r), inv[r]);
                        let proj: f64 =
                            xr.iter().zip(gr).zip(gv).map(|((a, b), c)| a * b * c).sum();
                        let coef = s * s * s * proj / n;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = s * gv[j] * gr[j] - xr[j] * coef;
                        }
                    }
                    Self::accumulate(grads, *x, dx)?;
                }
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let (xr, gr, s) = (xv.row(r), g.row(r), inv[r]);
                        for (j, o) in dg.data_mut().iter_mut().enumerate() {
                            *o += gr[j] * xr[j] * s;
                        }
                    }
                    Self::accumulate(grads, *gamma, dg)?;
                }
            }
            Op::Gather { table, ids } => {
                let (r, c) = self.value(*table).shape();
                let mut dt = Matrix::zeros(r, c);
                for (row, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *table, dt)?;
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, segments, probs, g);
                if self.wants(*q) {
                    Self::accumulate(grads, *q, dq)?;
                }
                if self.wants(*k) {
                    Self::accumulate(grads, *k, dk)?;
                }
                if self.wants(*v) {
                    Self::accumulate(grads, *v, dv)?;
                }
            }
            Op::OverrideRows { x, rows } => {
                let mut dx = g.clone();
                for &r in rows {
                    dx.row_mut(r).fill(0.0);
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.value(*logits).shape();
                let scale = g.as_scalar()? / targets.len() as f64;
                let mut dl = Matrix::zeros(r, c);
                for (&(row, cls), p) in targets.iter().zip(probs) {
                    for (o, &pi) in dl.row_mut(row).iter_mut().zip(p) {
                        *o += scale * pi;
                    }
                    let cur = dl.get(row, cls);
                    dl.set(row, cls, cur - scale);
                }
                Self::accumulate(grads, *logits, dl)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
        probs: &[Vec<f64>],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut pi = 0;
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[pi];
                pi += 1;
                let mut ds = vec![0.0; len];
                for t in 0..len {
                    let gt = &g.row(seg.start + t)[cols.clone()];
                    let prow = &p[t * len..t * len + t + 1];
                    // dP_ts = g_t . v_s ; dV_s += P_ts g_t
                    let mut acc = 0.0;
                    for (s, &w) in prow.iter().enumerate() {
                        let vs = &vv.row(seg.start + s)[cols.clone()];
                        let dp = dot(gt, vs);
                        ds[s] = dp;
                        acc += w * dp;
                        let dvs = &mut dv.row_mut(seg.start + s)[cols.clone()];
                        for (o, &x) in dvs.iter_mut().zip(gt) {
                            *o += w * x;
                        }
                    }
                    for (s, &w) in prow.iter().enumerate() {
                        let dsc = w * (ds[s] - acc) * scale;
                        if dsc == 0.0 {
                            continue;
                        }
                        let ks = &kv.row(seg.start + s)[cols.clone()];
                        let dqt = &mut dq.row_mut(seg.start + t)[cols.clone()];
                        for (o, &x) in dqt.iter_mut().zip(ks) {
                            *o += dsc * x;
                        }
                        let qt = &qv.row(seg.start + t)[cols.clone()];
                        let dks = &mut dk.row_mut(seg.start + s)[cols.clone()];
                        for (o, &x) in dks.iter_mut().zip(qt) {
                            *o += dsc * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_map_gradient() {
        let mut t = Tape::new();
        let w =
            t.parameter(Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 1.0]]).unwrap());
        let x = t.constant(Matrix::col_vector(&[0.3, -1.0, 2.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let dw = g.get(w).unwrap();
        for r in 0..2 {
            assert_eq!(dw.row(r), &[0.3, -1.0, 2.0]);
        }
        assert!(g.get(x).is_none());
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let xs = [0.5, -1.5, 2.0];
        let x = t.parameter(Matrix::row_vector(&xs));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::row_vector(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn untouched_parameter_absent() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::scalar(2.0));
        let _unused = t.parameter(Matrix::scalar(5.0));
        let loss = t.scale(a, 3.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(a).unwrap().data(), &[3.0]);
    }
}
