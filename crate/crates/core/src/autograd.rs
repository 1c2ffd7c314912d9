//! Reverse-mode differentiation over a per-sample tape of matrix operations.
//!
//! Each forward pass records its operations on a [`Tape`]. Leaves are either
//! constants (frozen weights, inputs) or named parameters; only parameters and
//! the nodes depending on them participate in the backward sweep.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::tensor::{gemm_into, Mat, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    Gelu(Var),
    Relu(Var),
    NormalizeRows(Var, Vec<T>),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet<T: Scalar> {
    grads: BTreeMap<String, Mat<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Mat<T>) {
        self.grads.insert(name.into(), grad);
    }

    /// Adds `grad` into the entry for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &Mat<T>) {
        match self.grads.get_mut(name) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &GradientSet<T>) {
        for (name, g) in &other.grads {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Mat::is_finite)
    }

    /// Name of the first tensor containing a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Mat<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// accumulates both contributions into one gradient.
    pub fn param(&mut self, name: &str, value: &'a Mat<T>) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// A leaf that is a parameter when `trainable`, a constant otherwise.
    pub fn leaf(&mut self, name: &str, value: &'a Mat<T>, trainable: bool) -> Var {
        if trainable {
            self.param(name, value)
        } else {
            self.constant_ref(value)
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push_owned(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the 1×d row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width");
        let mut out = self.value(x).clone();
        let cols = out.cols();
        let bias_row = b.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o = *o + bv;
            }
        }
        debug_assert_eq!(cols, bias_row.len());
        self.push_owned(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_owned(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.rows(), factors.len(), "one factor per row");
        for (r, &f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v = *v * f;
            }
        }
        self.push_owned(out, Op::ScaleRows(x, factors), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let out = Mat::from_vec(rows, cols, data).expect("consistent concat");
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let cols = m.cols();
        let out = Mat::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec())
            .expect("slice shape");
        self.push_owned(out, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let out = Mat::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push_owned(out, Op::SliceCols(x, start), &[x])
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let out = Mat::from_vec(ids.len(), cols, data).expect("gather shape");
        self.push_owned(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push_owned(out, Op::SoftmaxRows(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push_owned(out, Op::Relu(x), &[x])
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        self.push_owned(out, Op::NormalizeRows(x, norms), &[x])
    }

    /// Propagates the seed cotangents backwards and returns the gradient of
    /// every registered parameter (zeros for parameters the seeds do not reach).
    pub fn backward(&self, seeds: &[(Var, Mat<T>)]) -> GradientSet<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g, &self.nodes);
            top = top.max(v.0 + 1);
        }

        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(node.op, Op::Leaf);
            self.propagate(i, &g, &mut grads);
            if keep {
                grads[i] = Some(g);
            }
        }

        let mut out = GradientSet::new();
        for (name, v) in &self.params {
            match &grads[v.0] {
                Some(g) => out.accumulate(name, g),
                None => {
                    let (r, c) = self.value(*v).shape();
                    out.accumulate(name, &Mat::zeros(r, c));
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A B
                if self.wants(*a) {
                    let dst = slot(grads, *a, nodes);
                    gemm_into(g, false, self.value(*b), true, T::one(), dst);
                }
                if self.wants(*b) {
                    let dst = slot(grads, *b, nodes);
                    gemm_into(self.value(*a), true, g, false, T::one(), dst);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ
                if self.wants(*a) {
                    let dst = slot(grads, *a, nodes);
                    gemm_into(g, false, self.value(*b), false, T::one(), dst);
                }
                if self.wants(*b) {
                    let dst = slot(grads, *b, nodes);
                    gemm_into(g, true, self.value(*a), false, T::one(), dst);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g, nodes);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g, nodes);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g, nodes);
                }
                if self.wants(*bias) {
                    let dst = slot(grads, *bias, nodes);
                    let d = dst.row_mut(0);
                    for r in 0..g.rows() {
                        for (o, &v) in d.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, nodes);
                    for (o, &v) in dst.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + v * *s;
                    }
                }
            }
            Op::ScaleRows(x, factors) => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, nodes);
                    for (r, &f) in factors.iter().enumerate() {
                        for (o, &v) in dst.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = *o + v * f;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let dst = slot(grads, p, nodes);
                        let src = &g.data()[offset * cols..(offset + rows) * cols];
                        for (o, &v) in dst.data_mut().iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        let dst = slot(grads, p, nodes);
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + width];
                            for (o, &v) in dst.row_mut(r).iter_mut().zip(src) {
                                *o = *o + v;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, nodes);
                    for r in 0..g.rows() {
                        for (o, &v) in dst.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, nodes);
                    for r in 0..g.rows() {
                        let d = &mut dst.row_mut(r)[*start..*start + g.cols()];
                        for (o, &v) in d.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let dst = slot(grads, *table, nodes);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dst.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).row(0);
                let (rows, cols) = g.shape();
                if self.wants(*x) {
                    let n = T::from_usize(cols).unwrap();
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[c];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            out[c] = inv_std[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, &dx, nodes);
                }
                if self.wants(*gamma) {
                    let dst = slot(grads, *gamma, nodes);
                    let d = dst.row_mut(0);
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] = d[c] + g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.wants(*beta) {
                    let dst = slot(grads, *beta, nodes);
                    let d = dst.row_mut(0);
                    for r in 0..rows {
                        for (o, &v) in d.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let y = &nodes[i].value;
                    let dst = slot(grads, *x, nodes);
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in dst.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = *o + yv * (gv - s);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dst = slot(grads, *x, nodes);
                    for ((o, &v), &gv) in dst.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        *o = *o + gv * gelu_grad(v);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dst = slot(grads, *x, nodes);
                    for ((o, &v), &gv) in dst.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        if v > T::zero() {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::NormalizeRows(x, norms) => {
                if self.wants(*x) {
                    let y = &nodes[i].value;
                    let dst = slot(grads, *x, nodes);
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let n = norms[r];
                        for ((o, &yv), &gv) in dst.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = *o + (gv - yv * s) / n;
                        }
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Mat<T>>],
    v: Var,
    nodes: &[Node<'_, T>],
) -> &'g mut Mat<T> {
    grads[v.0].get_or_insert_with(|| {
        let (r, c) = nodes[v.0].value.shape();
        Mat::zeros(r, c)
    })
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: &Mat<T>, nodes: &[Node<'_, T>]) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        None => {
            debug_assert_eq!(nodes[v.0].value.shape(), g.shape());
            grads[v.0] = Some(g.clone());
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        // Small deterministic pseudo-random fill, independent of the rand crate.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Scalar objective: sum of (output ⊙ fixed weights), so the seed is the weight matrix.
    fn check<F>(inputs: &[Mat<f64>], build: F)
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
    {
        let eval = |vals: &[Mat<f64>]| -> (f64, Mat<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.constant(m.clone())).collect();
            let out = build(&mut tape, &vars);
            let o = tape.value(out).clone();
            let w = mat(o.rows(), o.cols(), 99);
            let f = o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            (f, w)
        };

        let mut tape = Tape::new();
        let names: Vec<String> = (0..inputs.len()).map(|i| format!("in{i}")).collect();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&names)
            .map(|(m, n)| tape.param(n, m))
            .collect();
        let out = build(&mut tape, &vars);
        let (_, w) = eval(inputs);
        let grads = tape.backward(&[(out, w)]);

        let eps = 1e-6;
        for (idx, input) in inputs.iter().enumerate() {
            let g = grads.get(&names[idx]).unwrap();
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[j] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = g.data()[j];
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "input {idx} coord {j}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_grads() {
        check(&[mat(3, 4, 1), mat(4, 2, 2)], |t, v| t.matmul(v[0], v[1]));
        check(&[mat(3, 4, 1), mat(5, 4, 2)], |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn elementwise_and_structural_grads() {
        check(&[mat(3, 4, 3)], |t, v| t.gelu(v[0]));
        check(&[mat(3, 4, 4)], |t, v| t.relu(v[0]));
        check(&[mat(3, 4, 5)], |t, v| t.softmax_rows(v[0]));
        check(&[mat(3, 4, 6)], |t, v| t.normalize_rows(v[0]));
        check(&[mat(3, 4, 7), mat(1, 4, 8)], |t, v| t.add_row(v[0], v[1]));
        check(&[mat(3, 4, 9), mat(2, 4, 10)], |t, v| t.concat_rows(&[v[0], v[1]]));
        check(&[mat(3, 4, 11), mat(3, 2, 12)], |t, v| t.concat_cols(&[v[0], v[1]]));
        check(&[mat(5, 4, 13)], |t, v| t.slice_rows(v[0], 1, 3));
        check(&[mat(5, 4, 14)], |t, v| t.slice_cols(v[0], 1, 2));
        check(&[mat(5, 4, 15)], |t, v| t.gather(v[0], &[4, 0, 4, 2]));
        check(&[mat(3, 4, 16)], |t, v| t.scale_rows(v[0], vec![0.5, -2.0, 3.0]));
    }

    #[test]
    fn layer_norm_grads() {
        check(&[mat(3, 6, 17), mat(1, 6, 18), mat(1, 6, 19)], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        });
    }

    #[test]
    fn reused_node_accumulates() {
        check(&[mat(3, 3, 20)], |t, v| {
            let sq = t.matmul(v[0], v[0]);
            t.add(sq, v[0])
        });
    }

    #[test]
    fn quadratic_gradient() {
        // f(w) = ‖w‖² at w = (1, 2) → grad (2, 4)
        let w = Mat::row_vector(vec![1.0f64, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param("w", &w);
        let sq = tape.matmul_nt(v, v);
        assert_eq!(tape.value(sq).get(0, 0), 5.0);
        let g = tape.backward(&[(sq, Mat::row_vector(vec![1.0]))]);
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let a = Mat::row_vector(vec![1.0f64, 2.0]);
        let b = Mat::row_vector(vec![3.0f64, 4.0]);
        let mut tape = Tape::new();
        let va = tape.param("a", &a);
        let _vb = tape.param("b", &b);
        let out = tape.scale(va, 2.0);
        let g = tape.backward(&[(out, Mat::row_vector(vec![1.0, 1.0]))]);
        assert_eq!(g.get("b").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get("a").unwrap().data(), &[2.0, 2.0]);
    }
}
