//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order. Because a node can
//! only reference nodes created before it, walking the tape backwards is a
//! reverse topological traversal, and gradients of reused nodes accumulate.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Tanh(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaskRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    RowDot(Var, Var),
    BlockMeanRows {
        x: Var,
        block: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * a * x * x)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.numel() != n {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: F = v.data().iter().copied().sum();
        let m = s / F::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|&x| x <= F::zero()) {
            return Err(Error::InvalidArgument("ln of non-positive value".into()));
        }
        let out = v.map(|x| x.ln());
        Ok(self.push(out, Op::Ln(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors), computed
    /// with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len().max(1);
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        if rank == 2 && axis == 0 {
            let t = self.transpose(a);
            let s = self.softmax(t, 1)?;
            return Ok(self.transpose(s));
        }
        let v = self.value(a);
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(v.cols()) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit (biased) variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n < 2 {
            return Err(Error::InvalidArgument("layer_norm needs at least 2 features".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let nf = F::from_f64(n as f64);
        let mut out = xv.clone();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, o) in row.iter_mut().enumerate() {
                let h = (*o - mean) * r;
                xhat.push(h);
                *o = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below 1e-12
    /// are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let norm = dot(row, row).sqrt();
            if !(norm.as_f64() >= 1e-12) {
                return Err(Error::ZeroNorm {
                    row: r,
                    norm: norm.as_f64(),
                });
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let r = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidArgument(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Replaces every row `i` with `mask[i] == true` by `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        if mask.len() != xv.rows() || tv.numel() != xv.cols() {
            return Err(Error::shape("mask_rows", xv.shape(), tv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &m) in out.data_mut().chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(tv.data());
            }
        }
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            &[x, token],
        ))
    }

    /// Row-wise dot products of two `m x d` matrices, giving `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("row_dot", av.shape(), bv.shape()));
        }
        let data: Vec<F> = (0..av.rows()).map(|i| dot(av.row(i), bv.row(i))).collect();
        let out = Tensor::new(vec![av.rows(), 1], data)?;
        Ok(self.push(out, Op::RowDot(a, b), &[a, b]))
    }

    /// Averages consecutive groups of `block` rows: `(B*block) x d -> B x d`.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if block == 0 || r % block != 0 {
            return Err(Error::InvalidArgument(format!(
                "{r} rows are not divisible into blocks of {block}"
            )));
        }
        let inv = F::one() / F::from_f64(block as f64);
        let mut data = vec![F::zero(); (r / block) * c];
        for i in 0..r {
            let dst = &mut data[(i / block) * c..(i / block + 1) * c];
            for (d, &v) in dst.iter_mut().zip(xv.row(i)) {
                *d = *d + v * inv;
            }
        }
        let out = Tensor::new(vec![r / block, c], data)?;
        Ok(self.push(out, Op::BlockMeanRows { x, block }, &[x]))
    }

    /// Bidirectional multi-head scaled dot-product attention over independent
    /// windows of `seq_len` rows. `q`, `k`, `v` are `(B*seq_len) x d` with the
    /// heads laid out as contiguous column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: {rows}x{d} not divisible into windows of {seq_len} and {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let blocks = rows / seq_len;
        let mut probs = vec![F::zero(); blocks * heads * seq_len * seq_len];
        let mut out = vec![F::zero(); rows * d];
        for b in 0..blocks {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qv.row(b * seq_len + i)[h * dh..(h + 1) * dh];
                    for j in 0..seq_len {
                        let kj = &kv.row(b * seq_len + j)[h * dh..(h + 1) * dh];
                        p[i * seq_len + j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut p[i * seq_len..(i + 1) * seq_len]);
                    let o = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..seq_len {
                        let w = p[i * seq_len + j];
                        let vj = &vv.row(b * seq_len + j)[h * dh..(h + 1) * dh];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo = *oo + w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// laid out as `[window][head][query][key]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[F]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `logits` (`m x c`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("target class {t} out of range for {c} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total = total + (lse - row[targets[i]]);
            softmax_in_place(row);
        }
        let loss = total / F::from_f64(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask (0 or 1 entries).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(Error::shape("dropout", xv.shape(), &[keep.len()]));
        }
        let s = F::from_f64(1.0 / (1.0 - p));
        let keep: Vec<F> = keep.iter().map(|&k| if k { s } else { F::zero() }).collect();
        let mut out = xv.clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o = *o * k;
        }
        Ok(self.push(out, Op::Dropout { x, keep }, &[x]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, "mul", |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(av, "mul", |x, y| x * y)?);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let bv = self.value(*bias);
                    let n = bv.numel();
                    let mut db = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, g.data().to_vec())?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = F::from_f64(self.value(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(out, "exp", |x, y| x * y)?);
            }
            Op::Ln(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), "ln", |x, y| x / y)?);
            }
            Op::Gelu(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), "gelu", |x, y| x * gelu_grad(y))?);
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(out, "tanh", |x, y| x * (F::one() - y * y))?);
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, t.into_data())?);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut dx = vec![F::zero(); out.numel()];
                for ((y, dy), d) in out.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = dot(y, dy);
                    for j in 0..c {
                        d[j] = y[j] * (dy[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let n = out.cols();
                let nf = F::from_f64(n as f64);
                let mut dx = vec![F::zero(); out.numel()];
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                for r in 0..out.rows() {
                    let dy = &g.data()[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..n {
                        let dxh = dy[j] * gv.data()[j];
                        mean_d = mean_d + dxh;
                        mean_dx = mean_dx + dxh * xh[j];
                        dgain[j] = dgain[j] + dy[j] * xh[j];
                        dbias[j] = dbias[j] + dy[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for j in 0..n {
                        let dxh = dy[j] * gv.data()[j];
                        dx[r * n + j] = rstd[r] * (dxh - mean_d - xh[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                self.accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), dgain)?);
                let bshape = self.shape(*bias).to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?);
            }
            Op::L2Normalize { x, norms } => {
                let c = out.cols();
                let mut dx = vec![F::zero(); out.numel()];
                for (r, ((y, dy), d)) in out
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let s = dot(y, dy);
                    for j in 0..c {
                        d[j] = (dy[j] - y[j] * s) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, w) = (xv.cols(), out.cols());
                let mut dx = vec![F::zero(); xv.numel()];
                for r in 0..out.rows() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let mut dp = Vec::with_capacity(pv.numel());
                    for r in 0..out.rows() {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.numel();
                    let dp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp)?);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![F::zero(); xv.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (d, &v) in dx[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MaskRows { x, token, mask } => {
                let c = out.cols();
                let mut dx = g.data().to_vec();
                let tv = self.value(*token);
                let mut dt = vec![F::zero(); c];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        let row = &mut dx[r * c..(r + 1) * c];
                        for (d, v) in dt.iter_mut().zip(row.iter_mut()) {
                            *d = *d + *v;
                            *v = F::zero();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                self.accumulate(grads, *token, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da = vec![F::zero(); av.numel()];
                let mut db = vec![F::zero(); bv.numel()];
                for r in 0..av.rows() {
                    let gr = g.data()[r];
                    for j in 0..c {
                        da[r * c + j] = gr * bv.data()[r * c + j];
                        db[r * c + j] = gr * av.data()[r * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::BlockMeanRows { x, block } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let inv = F::one() / F::from_f64(*block as f64);
                let mut dx = vec![F::zero(); xv.numel()];
                for r in 0..xv.rows() {
                    for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(g.row(r / block)) {
                        *d = v * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = (qv.rows(), qv.cols());
                let (heads, n) = (*heads, *seq_len);
                let dh = d / heads;
                let scale = F::one() / F::from_f64(dh as f64).sqrt();
                let mut dq = vec![F::zero(); rows * d];
                let mut dk = vec![F::zero(); rows * d];
                let mut dv = vec![F::zero(); rows * d];
                let mut ds = vec![F::zero(); n * n];
                for b in 0..rows / n {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * n * n..][..n * n];
                        let col = |row: usize| (b * n + row) * d + h * dh;
                        for i in 0..n {
                            let go = &g.data()[col(i)..col(i) + dh];
                            // dP[i][j] = dO_i . V_j, and dV_j += P[i][j] dO_i
                            for j in 0..n {
                                ds[i * n + j] = dot(go, &vv.data()[col(j)..col(j) + dh]);
                                let w = p[i * n + j];
                                for (dvv, &x) in dv[col(j)..col(j) + dh].iter_mut().zip(go) {
                                    *dvv = *dvv + w * x;
                                }
                            }
                            let row = &mut ds[i * n..(i + 1) * n];
                            let s = dot(&p[i * n..(i + 1) * n], row);
                            for j in 0..n {
                                row[j] = p[i * n + j] * (row[j] - s) * scale;
                            }
                        }
                        for i in 0..n {
                            for j in 0..n {
                                let w = ds[i * n + j];
                                if w == F::zero() {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[col(i) + t] = dq[col(i) + t] + w * kv.data()[col(j) + t];
                                    dk[col(j) + t] = dk[col(j) + t] + w * qv.data()[col(i) + t];
                                }
                            }
                        }
                    }
                }
                let shape = qv.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), dq)?);
                self.accumulate(grads, *k, Tensor::new(shape.clone(), dk)?);
                self.accumulate(grads, *v, Tensor::new(shape, dv)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g.item() / F::from_f64(targets.len() as f64);
                let mut dl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] = dl[r * c + t] - scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::Dropout { x, keep } => {
                let mut dx = g.clone();
                for (d, &k) in dx.data_mut().iter_mut().zip(keep) {
                    *d = *d * k;
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| v.at(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::vector(vec![1.0, -1.0])) < 1e-9);

        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::vector(vec![3.0; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let one = tape.constant(Tensor::vector(vec![1.0]));
        assert!(tape.layer_norm(one, one, one, 1e-5).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::vector(vec![0.6, 0.8])) < 1e-15);
        let y2 = tape.l2_normalize(y).unwrap();
        assert!(tape.value(y2).max_abs_diff(tape.value(y)) < 1e-15);
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(s).unwrap().item(), 1.0);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reused_tensor_accumulates_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.7));
        let ax = tape.scale(x, 2.5);
        let bx = tape.scale(x, -0.25);
        let loss = tape.add(ax, bx).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.5 + -0.25);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn mask_rows_routes_gradient_to_token() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let tok = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.mask_rows(x, tok, &[false, true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.get(tok).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_single_logit_is_zero() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(t(&[vec![3.0], vec![-7.0]]));
        let ce = tape.cross_entropy(l, &[0, 0]).unwrap();
        assert_eq!(tape.value(ce).item(), 0.0);
    }
}
