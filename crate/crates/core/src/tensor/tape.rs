//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter as
//! borrowed leaves tagged with their slot in the parameter store, so a
//! backward sweep yields gradients keyed by slot. Operations are coarse
//! (matmul, RMS normalization, rotary encoding, fused causal attention) and
//! each carries a hand-written adjoint.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::matrix::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Accounting bucket for a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopTag {
    /// Attention projections and feed-forward matrices.
    Linear,
    /// Score and value products inside attention.
    Attention,
    /// Output head.
    Head,
    /// Vision projector (outside the decoder stack).
    Projector,
    /// Low-rank adapter products.
    Adapter,
}

/// Multiply-accumulate counts per bucket, accumulated as the tape executes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub linear: u128,
    pub attention: u128,
    pub head: u128,
    pub projector: u128,
    pub adapter: u128,
}

impl MacCounter {
    fn add(&mut self, tag: FlopTag, macs: u128) {
        match tag {
            FlopTag::Linear => self.linear += macs,
            FlopTag::Attention => self.attention += macs,
            FlopTag::Head => self.head += macs,
            FlopTag::Projector => self.projector += macs,
            FlopTag::Adapter => self.adapter += macs,
        }
    }

    /// FLOPs of the decoder stack plus head, one multiply-accumulate = 2 FLOPs.
    /// Projector and adapter products are outside this convention.
    pub fn decoder_flops(&self) -> u128 {
        2 * (self.linear + self.attention + self.head)
    }
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, positions: Vec<usize>, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix<T>> },
    GatherRows(Var, Vec<usize>),
    CombineRows(Var, Vec<Vec<(usize, T)>>),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    macs: MacCounter,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: MacCounter::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Attention probabilities (one `n x n` matrix per head) stored by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(Cow::Owned(m), Op::Input, false)
    }

    pub fn param(&mut self, m: &'a Matrix<T>, slot: usize, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(m), Op::Param(slot), requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var, tag: FlopTag) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols(), mb.rows(), "matmul shape mismatch");
        let mut out = Matrix::zeros(ma.rows(), mb.cols());
        matmul_into(ma, mb, &mut out);
        let macs = (ma.rows() * ma.cols() * mb.cols()) as u128;
        self.macs.add(tag, macs);
        let rg = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add shape mismatch");
        let rg = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(bias));
        assert_eq!((1, ma.cols()), mb.shape(), "bias shape mismatch");
        let mut out = ma.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(mb.as_slice()) {
                *o += b;
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        self.push(Cow::Owned(out), Op::AddRow(a, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "mul shape mismatch");
        let data = ma.as_slice().iter().zip(mb.as_slice()).map(|(&x, &y)| x * y).collect();
        let out = Matrix::from_vec(ma.rows(), ma.cols(), data).expect("shape");
        let rg = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.needs(a);
        self.push(Cow::Owned(out), Op::Silu(a), rg)
    }

    /// Gain-only RMS normalization of each row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Var {
        let (mx, mg) = (self.value(x), self.value(gain));
        assert_eq!((1, mx.cols()), mg.shape(), "gain shape mismatch");
        let n = T::of_usize(mx.cols());
        let mut out = Matrix::zeros(mx.rows(), mx.cols());
        let mut inv_rms = Vec::with_capacity(mx.rows());
        for i in 0..mx.rows() {
            let row = mx.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(mg.as_slice()) {
                *o = v * r * g;
            }
        }
        let rg = self.needs(x) || self.needs(gain);
        self.push(Cow::Owned(out), Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Rotary position encoding; row `i` is rotated by `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Var {
        let mx = self.value(x);
        assert_eq!(mx.rows(), positions.len(), "one position per row");
        let mut out = mx.clone();
        rotate_rows(&mut out, positions, heads, base, false);
        let rg = self.needs(x);
        let op = Op::Rope { x, positions: positions.to_vec(), heads, base };
        self.push(Cow::Owned(out), op, rg)
    }

    /// Multi-head scaled dot-product attention under a strict causal mask.
    ///
    /// `key_mask[j] == false` removes token `j` as a key for every query other
    /// than itself. Scores and value products are computed densely over all
    /// `n x n` pairs before masking.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (mq, mk, mv) = (self.value(q), self.value(k), self.value(v));
        if !(mq.is_finite() && mk.is_finite() && mv.is_finite()) {
            return Err(Error::Numeric("non-finite attention input".into()));
        }
        let (out, probs) = attention_forward(mq, mk, mv, heads, key_mask);
        let n = mq.rows() as u128;
        self.macs.add(FlopTag::Attention, 2 * n * n * mq.cols() as u128);
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Cow::Owned(out), Op::Attention { q, k, v, heads, probs }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select_rows(&rows);
        let rg = self.needs(x);
        self.push(Cow::Owned(out), Op::GatherRows(x, rows), rg)
    }

    /// Each output row is a weighted sum of input rows.
    pub fn combine_rows(&mut self, x: Var, rows: Vec<Vec<(usize, T)>>) -> Var {
        let mx = self.value(x);
        let mut out = Matrix::zeros(rows.len(), mx.cols());
        for (r, terms) in rows.iter().enumerate() {
            for &(src, w) in terms {
                for (o, &val) in out.row_mut(r).iter_mut().zip(mx.row(src)) {
                    *o += w * val;
                }
            }
        }
        let rg = self.needs(x);
        self.push(Cow::Owned(out), Op::CombineRows(x, rows), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vcat(&mats).expect("concat column mismatch");
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean token-level cross-entropy of `logits` rows against `targets`; yields a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ml = self.value(logits);
        if ml.rows() != targets.len() || ml.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy over {} rows with {} targets",
                ml.rows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= ml.cols()) {
            return Err(Error::InvalidArgument(format!("target {t} out of vocabulary")));
        }
        let probs = softmax_rows(ml);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = ml.row(i);
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let loss = Matrix::filled(1, 1, total / T::of_usize(targets.len()));
        let rg = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Cow::Owned(loss), op, rg))
    }

    /// Backpropagates from a `1 x 1` node; returns `(slot, gradient)` for every
    /// parameter leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Vec<(usize, Matrix<T>)>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward on a node that was never recorded".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::State("backward requires a scalar loss node".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => out.push((*slot, g)),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        matmul_nt_into(&g, self.value(*b), ga);
                    }
                    if self.needs(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        matmul_tn_into(self.value(*a), &g, gb);
                    }
                }
                Op::Add(a, b) => {
                    for &x in [a, b] {
                        if self.needs(x) {
                            self.grad_slot(&mut grads, x).add_assign(&g);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*a) {
                        self.grad_slot(&mut grads, *a).add_assign(&g);
                    }
                    if self.needs(*bias) {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for i in 0..g.rows() {
                            for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (x, other) in [(*a, *b), (*b, *a)] {
                        if self.needs(x) {
                            let ov = self.value(other).as_slice().to_vec();
                            let gx = self.grad_slot(&mut grads, x);
                            for ((o, &gv), &w) in gx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(&ov) {
                                *o += gv * w;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(*a) {
                        self.grad_slot(&mut grads, *a).axpy(*s, &g);
                    }
                }
                Op::Silu(a) => {
                    if self.needs(*a) {
                        let xs = self.value(*a).as_slice().to_vec();
                        let ga = self.grad_slot(&mut grads, *a);
                        for ((o, &gv), &x) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(&xs) {
                            let s = sigmoid(x);
                            *o += gv * s * (T::one() + x * (T::one() - s));
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => self.rms_norm_backward(&mut grads, &g, *x, *gain, inv_rms),
                Op::Rope { x, positions, heads, base } => {
                    if self.needs(*x) {
                        let mut back = g;
                        rotate_rows(&mut back, positions, *heads, *base, true);
                        self.grad_slot(&mut grads, *x).add_assign(&back);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, &g, [*q, *k, *v], *heads, probs)
                }
                Op::GatherRows(x, rows) => {
                    if self.needs(*x) {
                        let gx = self.grad_slot(&mut grads, *x);
                        for (r, &src) in rows.iter().enumerate() {
                            for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::CombineRows(x, rows) => {
                    if self.needs(*x) {
                        let gx = self.grad_slot(&mut grads, *x);
                        for (r, terms) in rows.iter().enumerate() {
                            for &(src, w) in terms {
                                for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                                    *o += w * v;
                                }
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            let gp = self.grad_slot(&mut grads, p);
                            for r in 0..rows {
                                for (o, &v) in gp.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                                    *o += v;
                                }
                            }
                        }
                        offset += rows;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if self.needs(*logits) {
                        let upstream = g[(0, 0)] / T::of_usize(targets.len());
                        let gl = self.grad_slot(&mut grads, *logits);
                        for (i, &t) in targets.iter().enumerate() {
                            for (j, o) in gl.row_mut(i).iter_mut().enumerate() {
                                let y = if j == t { T::one() } else { T::zero() };
                                *o += upstream * (probs[(i, j)] - y);
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(|(slot, _)| *slot);
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Matrix<T>>], v: Var) -> &'g mut Matrix<T> {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn rms_norm_backward(
        &self,
        grads: &mut [Option<Matrix<T>>],
        g: &Matrix<T>,
        x: Var,
        gain: Var,
        inv_rms: &[T],
    ) {
        let mx = self.value(x).clone();
        let mg = self.value(gain).clone();
        let n = T::of_usize(mx.cols());
        if self.needs(gain) {
            let gg = self.grad_slot(grads, gain);
            for i in 0..mx.rows() {
                for ((o, &dy), &xv) in gg.as_mut_slice().iter_mut().zip(g.row(i)).zip(mx.row(i)) {
                    *o += dy * xv * inv_rms[i];
                }
            }
        }
        if self.needs(x) {
            let gx = self.grad_slot(grads, x);
            for i in 0..mx.rows() {
                let r = inv_rms[i];
                let row = mx.row(i);
                let dot: T = g.row(i).iter().zip(mg.as_slice()).zip(row).map(|((&dy, &gv), &xv)| dy * gv * xv).sum();
                let coef = r * r * r * dot / n;
                for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                    *o += r * mg.as_slice()[j] * g[(i, j)] - coef * row[j];
                }
            }
        }
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Matrix<T>>],
        g: &Matrix<T>,
        [q, k, v]: [Var; 3],
        heads: usize,
        probs: &[Matrix<T>],
    ) {
        let (mq, mk, mv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = mq.shape();
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = vec![T::zero(); n];
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            for i in 0..n {
                let go = &g.row(i)[off..off + dh];
                let mut weighted = T::zero();
                for j in 0..n {
                    let pij = p[(i, j)];
                    if pij == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &mv.row(j)[off..off + dh];
                    let dot: T = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dp[j] = dot;
                    weighted += pij * dot;
                    for (o, &gv) in dv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                        *o += pij * gv;
                    }
                }
                for j in 0..n {
                    let pij = p[(i, j)];
                    if pij == T::zero() {
                        continue;
                    }
                    let ds = pij * (dp[j] - weighted) * scale;
                    let kj = &mk.row(j)[off..off + dh];
                    for (o, &kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let qi = &mq.row(i)[off..off + dh];
                    for (o, &qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                self.grad_slot(grads, var).add_assign(&delta);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// Whether query `i` may read key `j`.
#[inline]
fn key_allowed(i: usize, j: usize, key_mask: Option<&[bool]>) -> bool {
    j <= i && (j == i || key_mask.is_none_or(|m| m[j]))
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (n, d) = q.shape();
    assert_eq!(d % heads, 0, "width must divide into heads");
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + dh];
                *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let mut mx = T::neg_infinity();
            for (j, &s) in row.iter().enumerate() {
                if key_allowed(i, j, key_mask) {
                    mx = mx.max(s);
                }
            }
            let mut total = T::zero();
            for (j, s) in row.iter_mut().enumerate() {
                if key_allowed(i, j, key_mask) {
                    *s = (*s - mx).exp();
                    total += *s;
                } else {
                    *s = T::zero();
                }
            }
            for s in row.iter_mut() {
                *s /= total;
            }
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (j, &pij) in p.row(i).iter().enumerate() {
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, positions: &[usize], heads: usize, base: f64, inverse: bool) {
    let d = m.cols();
    let dh = d / heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    for (i, &pos) in positions.iter().enumerate() {
        let row = m.row_mut(i);
        for (f, &freq) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            for h in 0..heads {
                let a = h * dh + 2 * f;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}
