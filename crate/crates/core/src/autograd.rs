//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Sequences from
//! several examples are packed row-wise into one matrix; attention is computed
//! per [`Span`] so examples never see each other. Parameters enter the tape by
//! name from a [`ParamStore`] and come back out of [`Tape::backward`] keyed by
//! the same name.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous block of rows belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Consecutive spans for the given lengths, starting at row 0.
    pub fn pack(lens: &[usize]) -> Vec<Span> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let sp = Span::new(start, len);
                start += len;
                sp
            })
            .collect()
    }
}

/// Which keys a query position may attend to (allowed = true).
#[derive(Clone, Debug)]
pub enum AttnMask {
    Full,
    Causal,
    Explicit(Arc<Array2<bool>>),
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::Explicit(m) => m[[i, j]],
        }
    }
}

/// Log-probabilities are floored here when computing cross-entropy values.
pub const LOG_PROB_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Rows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Attention(Box<AttnRecord<T>>),
    CrossEntropy { logits: Var, targets: Array2<T>, weights: Vec<T>, probs: Array2<T> },
    BceLogits { logits: Var, targets: Array2<T> },
}

struct AttnRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_spans: Vec<Span>,
    k_spans: Vec<Span>,
    /// `probs[segment][head]`, each `q_len x k_len`.
    probs: Vec<Vec<Array2<T>>>,
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: IndexMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A non-differentiable input. Gradients still flow *to* it and can be read
    /// through [`Gradients::wrt`].
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Named parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1xn` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` by a `1xn` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies by a `1x1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a) * c;
        self.push(value, Op::ScaleBy(a, s))
    }

    /// Divides by a `1x1` node.
    pub fn div_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a) / c;
        self.push(value, Op::DivBy(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::lit(xv.ncols() as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Scales each row to unit L2 norm (`x / (‖x‖ + 1e-12)`).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt();
            let d = n + T::lit(NORM_EPS);
            row.mapv_inplace(|e| e / d);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Gathers rows by index; indices may repeat.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(out, Op::Rows { x, idx: idx.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Array2::from_elem((1, 1), m.sum() / T::lit(m.len() as f64));
        self.push(value, Op::Mean(a))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Query span `i` attends to key span `i` under `masks[i]`. Key spans may
    /// overlap or repeat, which lets every example share one key set. Rows of
    /// `q` outside all spans produce zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_spans: &[Span],
        k_spans: &[Span],
        masks: &[AttnMask],
    ) -> Var {
        assert_eq!(q_spans.len(), k_spans.len(), "one key span per query span");
        assert_eq!(q_spans.len(), masks.len(), "one mask per query span");
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "model width divisible by head count");
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_spans.len());
        for ((qs, ks), mask) in q_spans.iter().zip(k_spans).zip(masks) {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qs.start..qs.end(), cols.clone()]);
                let kh = kv.slice(s![ks.start..ks.end(), cols.clone()]);
                let vh = vv.slice(s![ks.start..ks.end(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                masked_softmax_rows(&mut p, mask);
                out.slice_mut(s![qs.start..qs.end(), cols]).assign(&p.dot(&vh));
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let rec = AttnRecord {
            q,
            k,
            v,
            heads,
            q_spans: q_spans.to_vec(),
            k_spans: k_spans.to_vec(),
            probs,
        };
        self.push(out, Op::Attention(Box::new(rec)))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, indexed
    /// `[span][head]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<Array2<T>>]> {
        match &self.nodes[v.0].op {
            Op::Attention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    /// Weighted mean over rows of the cross-entropy between `softmax(logits)`
    /// and the target distributions. Returns a `1x1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Array2<T>, weights: Vec<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        assert_eq!(weights.len(), lv.nrows());
        let floor = T::lit(LOG_PROB_FLOOR.ln());
        let mut probs = lv.clone();
        let mut total = T::zero();
        let mut wsum = T::zero();
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            let w = weights[r];
            wsum += w;
            let mut ce = T::zero();
            for (c, e) in row.iter_mut().enumerate() {
                let lp = *e - lse;
                let t = targets[[r, c]];
                if t != T::zero() {
                    ce -= t * lp.max(floor);
                }
                *e = lp.exp();
            }
            total += w * ce;
        }
        let loss = if wsum > T::zero() { total / wsum } else { T::zero() };
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::CrossEntropy { logits, targets, weights, probs })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let n = T::lit(lv.len() as f64);
        let total = Zip::from(lv)
            .and(&targets)
            .fold(T::zero(), |acc, &x, &y| acc + softplus(x) - y * x);
        let value = Array2::from_elem((1, 1), total / n);
        self.push(value, Op::BceLogits { logits, targets })
    }

    /// Reverse sweep from a `1x1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward starts from a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(val(*b)));
                accumulate(grads, *b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                accumulate(grads, *a, g * val(*row));
                let dr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *row, dr);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[[0, 0]];
                accumulate(grads, *a, g * c);
                let ds = (g * val(*a)).sum();
                accumulate(grads, *s, Array2::from_elem((1, 1), ds));
            }
            Op::DivBy(a, s) => {
                let c = val(*s)[[0, 0]];
                accumulate(grads, *a, g / c);
                let ds = -(g * val(*a)).sum() / (c * c);
                accumulate(grads, *s, Array2::from_elem((1, 1), ds));
            }
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(gelu_grad);
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &self.nodes[i].value;
                let n = T::lit(xhat.ncols() as f64);
                let mut dx = Array2::zeros(xhat.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let yr = xhat.row(r);
                    let mg = gr.sum() / n;
                    let mgy = gr.dot(&yr) / n;
                    let inv = inv_std[r];
                    Zip::from(&mut out).and(&gr).and(&yr).for_each(|o, &gi, &yi| {
                        *o = inv * (gi - mg - yi * mgy);
                    });
                }
                accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let n = norms[r];
                    let d = n + T::lit(NORM_EPS);
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    let proj = if n > T::zero() { xr.dot(&gr) / (d * d * n) } else { T::zero() };
                    Zip::from(&mut out).and(&gr).and(&xr).for_each(|o, &gi, &xi| {
                        *o = gi / d - xi * proj;
                    });
                }
                accumulate(grads, *x, dx);
            }
            Op::Rows { x, idx } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(src);
                    dst += &g.row(r);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]]));
            }
            Op::Mean(a) => {
                let av = val(*a);
                let c = g[[0, 0]] / T::lit(av.len() as f64);
                accumulate(grads, *a, Array2::from_elem(av.dim(), c));
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let wsum: T = weights.iter().copied().sum();
                let mut dl = Array2::zeros(probs.dim());
                if wsum > T::zero() {
                    let up = g[[0, 0]];
                    for (r, mut out) in dl.rows_mut().into_iter().enumerate() {
                        let tsum = targets.row(r).sum();
                        let w = weights[r] / wsum * up;
                        Zip::from(&mut out)
                            .and(&probs.row(r))
                            .and(&targets.row(r))
                            .for_each(|o, &p, &t| *o = w * (p * tsum - t));
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::BceLogits { logits, targets } => {
                let lv = val(*logits);
                let c = g[[0, 0]] / T::lit(lv.len() as f64);
                let mut dl = Array2::zeros(lv.dim());
                Zip::from(&mut dl)
                    .and(lv)
                    .and(targets)
                    .for_each(|o, &x, &y| *o = (sigmoid(x) - y) * c);
                accumulate(grads, *logits, dl);
            }
        }
    }

    fn attention_backward(
        &self,
        rec: &AttnRecord<T>,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (qv, kv, vv) = (val(rec.q), val(rec.k), val(rec.v));
        let d = qv.ncols();
        let dh = d / rec.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        for ((qs, ks), per_head) in rec.q_spans.iter().zip(&rec.k_spans).zip(&rec.probs) {
            for (h, p) in per_head.iter().enumerate() {
                let cols = h * dh..(h + 1) * dh;
                let qrows = qs.start..qs.end();
                let krows = ks.start..ks.end();
                let gh = g.slice(s![qrows.clone(), cols.clone()]);
                let qh = qv.slice(s![qrows.clone(), cols.clone()]);
                let kh = kv.slice(s![krows.clone(), cols.clone()]);
                let vh = vv.slice(s![krows.clone(), cols.clone()]);

                let mut dvh = dv.slice_mut(s![krows.clone(), cols.clone()]);
                dvh += &p.t().dot(&gh);

                let dp = gh.dot(&vh.t());
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|e, &pi| *e = *e - pi * dot);
                }
                ds *= scale;
                let mut dqh = dq.slice_mut(s![qrows, cols.clone()]);
                dqh += &ds.dot(&kh);
                let mut dkh = dk.slice_mut(s![krows, cols]);
                dkh += &ds.t().dot(&qh);
            }
        }
        accumulate(grads, rec.q, dq);
        accumulate(grads, rec.k, dk);
        accumulate(grads, rec.v, dv);
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Array2<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Parameter gradients by name, skipping parameters the loss did not touch.
    pub fn into_params(mut self) -> IndexMap<String, Array2<T>> {
        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Row-wise softmax in place; disallowed entries become exactly zero.
pub fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, mask: &AttnMask) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = T::neg_infinity();
        let mut visible = false;
        for (j, &e) in row.iter().enumerate() {
            if mask.allows(i, j) {
                visible = true;
                // NaN sticks so non-finite scores reach the loss
                if e > max || e.is_nan() {
                    max = e;
                }
            }
        }
        assert!(visible, "attention row {i} has no visible key");
        let mut total = T::zero();
        for (j, e) in row.iter_mut().enumerate() {
            if mask.allows(i, j) {
                *e = (*e - max).exp();
                total += *e;
            } else {
                *e = T::zero();
            }
        }
        row.mapv_inplace(|e| e / total);
    }
}

pub fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at a leaf, compared against the tape.
    fn check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Array2<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let loss = build(&mut t, xv);
        let g = t.backward(loss);
        let analytic = g.wrt(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let xv = t.constant(xp);
                let l = build(&mut t, xv);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a: f64 = analytic[[r, c]];
            let err: f64 = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "entry ({r},{c}): analytic {a} vs numeric {fd}");
        }
    }

    fn fixture() -> Array2<f64> {
        array![[0.3, -1.2, 0.5, 2.0], [1.1, 0.4, -0.7, 0.05], [-0.2, 0.9, 1.3, -1.6]]
    }

    fn weights(t: &mut Tape<f64>, x: Var) -> Var {
        let w = t.constant(fixture().t().to_owned());
        let y = t.matmul(x, w);
        t.sum(y)
    }

    #[test]
    fn grad_layer_norm_and_gelu() {
        check(
            |t, x| {
                let y = t.layer_norm(x);
                let y = t.gelu(y);
                weights(t, y)
            },
            fixture(),
        );
    }

    #[test]
    fn grad_l2_normalize() {
        check(
            |t, x| {
                let y = t.l2_normalize(x);
                weights(t, y)
            },
            fixture(),
        );
    }

    #[test]
    fn grad_rows_concat_scale() {
        check(
            |t, x| {
                let a = t.rows(x, &[2, 0, 2]);
                let b = t.concat_rows(&[a, x]);
                let s = t.rows(x, &[1]);
                let s = t.mean(s);
                let y = t.div_by(b, s);
                let y = t.scale_by(y, s);
                let y = t.mul(y, b);
                let y = t.sum(y);
                t.scale(y, 0.5)
            },
            fixture(),
        );
    }

    #[test]
    fn grad_attention_with_masks() {
        let masks = [
            AttnMask::Causal,
            AttnMask::Explicit(Arc::new(array![[true, false], [true, true], [false, true]])),
        ];
        check(
            |t, x| {
                let x6 = t.rows(x, &[0, 1, 2, 1, 0, 2]);
                let q = t.scale(x6, 0.7);
                let o = t.attention(
                    q,
                    x,
                    x6,
                    2,
                    &[Span::new(0, 3), Span::new(3, 3)],
                    &[Span::new(0, 3), Span::new(1, 2)],
                    &masks,
                );
                let w = t.constant(fixture().t().to_owned());
                let y = t.matmul(o, w);
                let y = t.gelu(y);
                t.sum(y)
            },
            fixture(),
        );
    }

    #[test]
    fn grad_cross_entropy_and_bce() {
        let targets = array![[0.0, 1.0, 0.0, 0.0], [0.1, 0.1, 0.7, 0.1], [0.0, 0.0, 0.0, 1.0]];
        check(|t, x| t.cross_entropy(x, targets.clone(), vec![1.0, 0.5, 2.0]), fixture());
        let y = array![[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]];
        check(|t, x| t.bce_with_logits(x, y.clone()), fixture());
    }

    #[test]
    fn grad_matmul_t_and_rows_ops() {
        check(
            |t, x| {
                let r = t.rows(x, &[0]);
                let y = t.matmul_t(x, x);
                let row = t_row(t);
                let y = t.add_row(y, row);
                let z = t.mul_row(x, r);
                let z = t.sub(z, x);
                let a = t.sum(y);
                let b = t.sum(z);
                t.add(a, b)
            },
            fixture(),
        );
        fn t_row(t: &mut Tape<f64>) -> Var {
            t.constant(array![[0.1, 0.2, 0.3]])
        }
    }

    #[test]
    fn masked_softmax_zeroes_hidden_keys() {
        let mut s: Array2<f64> = array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]];
        masked_softmax_rows(&mut s, &AttnMask::Causal);
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(s[[0, 2]], 0.0);
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((s.row(1).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", array![[2.0]]);
        let mut t = Tape::new();
        let a = t.param(&ps, "w");
        let b = t.param(&ps, "w");
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let g = t.backward(y);
        assert_eq!(g.param("w").unwrap()[[0, 0]], 4.0);
    }
}
