//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly when an operation is added; [`Graph::backward`] then walks
//! the tape in reverse and accumulates exact derivatives into every
//! differentiable leaf (inputs and named parameters).
//!
//! Operations that would be awkward or slow to compose from primitives
//! (layer normalization, masked multi-head attention, masked softmax family,
//! cross entropy) are fused nodes with hand-derived backward passes. All of
//! them are covered by finite-difference checks in the test suite.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::{dot, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GradError {
    #[error("variable was recorded on a different graph")]
    ForeignVar,
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("loss does not depend on any differentiable input")]
    Detached,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// One attention block: `len` consecutive rows starting at `start`.
///
/// `key_mask[j]` is true when position `j` may be attended to.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub start: usize,
    pub len: usize,
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GroupMean {
        x: usize,
        groups: Vec<Vec<usize>>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<AttnSegment>,
        heads: usize,
        probs: Vec<Tensor>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    LogSumExpRows {
        x: usize,
        /// Softmax weights; zero at masked entries.
        probs: Tensor,
    },
    LogSoftmaxRows {
        x: usize,
        mask: Option<Vec<bool>>,
        probs: Tensor,
    },
    Diag(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Max-subtracted log-sum-exp over the included entries of a row.
fn masked_lse(row: &[f64], mask: Option<&[bool]>) -> f64 {
    let included = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| included(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(row.is_empty() || (0..row.len()).any(included), "row has no included entries");
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| included(*j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable used on a foreign graph");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn grad_of(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A differentiable leaf reported by name in [`Gradients::params`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.input(value);
        self.params.push((name.into(), v.index));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let mut out = self.nodes[ai].value.clone();
        out.add_assign(&self.nodes[bi].value);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::Add(ai, bi), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let mut out = self.nodes[ai].value.clone();
        out.axpy(-1.0, &self.nodes[bi].value);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::Sub(ai, bi), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::Mul(ai, bi), g)
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xi, bi) = (self.idx(x), self.idx(bias));
        let b = &self.nodes[bi].value;
        let mut out = self.nodes[xi].value.clone();
        assert_eq!(b.shape(), (1, out.cols()), "bias must be 1 x cols");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let g = self.grad_of(&[xi, bi]);
        self.push(out, Op::AddRow(xi, bi), g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.scaled(factor);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Scale(xi, factor), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.matmul(&self.nodes[bi].value);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::MatMul(ai, bi), g)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.matmul_t(&self.nodes[bi].value);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::MatMulT(ai, bi), g)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.transpose();
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Transpose(xi), g)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.map(gelu);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Gelu(xi), g)
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.nodes[xi].value;
        let (rows, cols) = xv.shape();
        let gv = &self.nodes[gi].value;
        let bv = &self.nodes[bi].value;
        assert_eq!(gv.shape(), (1, cols));
        assert_eq!(bv.shape(), (1, cols));
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let g = self.grad_of(&[xi, gi, bi]);
        self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let ti = self.idx(table);
        let t = &self.nodes[ti].value;
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let g = self.grad_of(&[ti]);
        self.push(
            out,
            Op::Gather {
                table: ti,
                ids: ids.to_vec(),
            },
            g,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        assert!(start + len <= xv.rows(), "row slice out of bounds");
        let out = Tensor::from_vec(
            len,
            xv.cols(),
            xv.data()[start * xv.cols()..(start + len) * xv.cols()].to_vec(),
        );
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SliceRows { x: xi, start }, g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        assert!(start + len <= xv.cols(), "column slice out of bounds");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SliceCols { x: xi, start }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let rows = self.nodes[idx[0]].value.rows();
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &i in &idx {
                let v = &self.nodes[i].value;
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let g = self.grad_of(&idx);
        self.push(out, Op::ConcatCols(idx), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let cols = self.nodes[idx[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let g = self.grad_of(&idx);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(idx), g)
    }

    /// Output row `b` is the mean of the rows of `x` listed in `groups[b]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let mut out = Tensor::zeros(groups.len(), xv.cols());
        for (b, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "empty pooling group");
            let w = 1.0 / group.len() as f64;
            let orow = out.row_mut(b);
            for &r in group {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += w * v;
                }
            }
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::GroupMean { x: xi, groups }, g)
    }

    /// Masked scaled dot-product attention, split into `heads` column blocks.
    ///
    /// Rows outside every segment are left at zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
    ) -> Var {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let (qv, kv, vv) = (
            &self.nodes[qi].value,
            &self.nodes[ki].value,
            &self.nodes[vi].value,
        );
        let (rows, dim) = qv.shape();
        assert_eq!(kv.shape(), (rows, dim));
        assert_eq!(vv.shape(), (rows, dim));
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, dim);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            assert_eq!(seg.key_mask.len(), seg.len);
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Tensor::zeros(seg.len, seg.len);
                for i in 0..seg.len {
                    let qrow = &qv.row(seg.start + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seg.len {
                        if seg.key_mask[j] {
                            let s = scale * dot(qrow, &kv.row(seg.start + j)[c0..c0 + dh]);
                            p.set(i, j, s);
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..seg.len {
                        if seg.key_mask[j] {
                            let e = (p.get(i, j) - max).exp();
                            p.set(i, j, e);
                            z += e;
                        }
                    }
                    let orow = &mut out.row_mut(seg.start + i)[c0..c0 + dh];
                    for j in 0..seg.len {
                        if seg.key_mask[j] {
                            let w = p.get(i, j) / z;
                            p.set(i, j, w);
                            for (o, x) in orow.iter_mut().zip(&vv.row(seg.start + j)[c0..c0 + dh]) {
                                *o += w * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let g = self.grad_of(&[qi, ki, vi]);
        self.push(
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                segments,
                heads,
                probs,
            },
            g,
        )
    }

    /// Scales each row to unit L2 norm. An all-zero row has no direction and
    /// comes out as NaN, which callers surface as a non-finite value.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::NormalizeRows { x: xi, norms }, g)
    }

    /// Row-wise log-sum-exp over entries where `mask` is true (all when `None`).
    /// Output is `rows × 1`.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let (rows, cols) = xv.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols);
        }
        let mut out = Tensor::zeros(rows, 1);
        let mut probs = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let rm = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            let lse = masked_lse(xv.row(r), rm);
            out.set(r, 0, lse);
            for c in 0..cols {
                if rm.is_none_or(|m| m[c]) {
                    probs.set(r, c, (xv.get(r, c) - lse).exp());
                }
            }
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::LogSumExpRows { x: xi, probs }, g)
    }

    /// Row-wise log-softmax over entries where `mask` is true. Excluded
    /// entries are reported as exactly 0 and receive no gradient.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let (rows, cols) = xv.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols);
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut probs = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let rm = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            let lse = masked_lse(xv.row(r), rm);
            for c in 0..cols {
                if rm.is_none_or(|m| m[c]) {
                    let y = xv.get(r, c) - lse;
                    out.set(r, c, y);
                    probs.set(r, c, y.exp());
                }
            }
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::LogSoftmaxRows { x: xi, mask, probs }, g)
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        assert_eq!(xv.rows(), xv.cols(), "diag of a non-square matrix");
        let out = Tensor::from_vec(xv.rows(), 1, (0..xv.rows()).map(|i| xv.get(i, i)).collect());
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Diag(xi), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Sum(xi), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::Mean(xi), g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        assert!(!targets.is_empty(), "cross entropy over zero rows");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lse = masked_lse(lv.row(r), None);
            total += lse - lv.get(r, t);
            for c in 0..lv.cols() {
                probs.set(r, c, (lv.get(r, c) - lse).exp());
            }
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let g = self.grad_of(&[li]);
        self.push(
            out,
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Exact gradients of the scalar `loss` with respect to every
    /// differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        if loss.graph != self.id {
            return Err(GradError::ForeignVar);
        }
        let root = &self.nodes[loss.index];
        if root.value.shape() != (1, 1) {
            let (rows, cols) = root.value.shape();
            return Err(GradError::NotScalar { rows, cols });
        }
        if !root.needs_grad {
            return Err(GradError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Constant | Op::Input => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.scaled(*f)),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.val(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.val(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.val(*a)));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Gelu(x) => {
                let xv = self.val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &xx)| gv * gelu_grad(xx))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.val(*gain);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv.data()[c]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                        let mean_ghx =
                            gh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx.set(
                                r,
                                c,
                                inv_std[r] * (gh[c] - mean_gh - xhat.get(r, c) * mean_ghx),
                            );
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let t = self.val(*table);
                    let mut dt = Tensor::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                let cols = g.cols();
                for &p in parts {
                    let h = self.val(p).rows();
                    if self.needs(p) {
                        let dp = Tensor::from_vec(
                            h,
                            cols,
                            g.data()[r0 * cols..(r0 + h) * cols].to_vec(),
                        );
                        self.accumulate(grads, p, dp);
                    }
                    r0 += h;
                }
            }
            Op::GroupMean { x, groups } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (b, group) in groups.iter().enumerate() {
                        let w = 1.0 / group.len() as f64;
                        for &r in group {
                            for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(b)) {
                                *d += w * v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads),
            Op::NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let y = &self.nodes[idx].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let proj = dot(y.row(r), g.row(r));
                        for c in 0..y.cols() {
                            dx.set(r, c, (g.get(r, c) - y.get(r, c) * proj) / norms[r]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LogSumExpRows { x, probs, .. } => {
                if self.needs(*x) {
                    let mut dx = probs.clone();
                    for r in 0..dx.rows() {
                        let gr = g.get(r, 0);
                        for d in dx.row_mut(r) {
                            *d *= gr;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LogSoftmaxRows { x, mask, probs } => {
                if self.needs(*x) {
                    let (rows, cols) = g.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let rm = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
                        let inc = |c: usize| rm.is_none_or(|m| m[c]);
                        let total: f64 = (0..cols).filter(|&c| inc(c)).map(|c| g.get(r, c)).sum();
                        for c in (0..cols).filter(|&c| inc(c)) {
                            dx.set(r, c, g.get(r, c) - probs.get(r, c) * total);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Diag(x) => {
                if self.needs(*x) {
                    let n = g.rows();
                    let mut dx = Tensor::zeros(n, n);
                    for i in 0..n {
                        dx.set(i, i, g.get(i, 0));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = self.val(*x).shape();
                let n = (r * c) as f64;
                self.accumulate(grads, *x, Tensor::filled(r, c, g.get(0, 0) / n));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let w = g.get(0, 0) / targets.len() as f64;
                    let mut dx = probs.scaled(w);
                    for (r, &t) in targets.iter().enumerate() {
                        let cur = dx.get(r, t);
                        dx.set(r, t, cur - w);
                    }
                    self.accumulate(grads, *logits, dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: usize,
        k: usize,
        v: usize,
        segments: &[AttnSegment],
        heads: usize,
        probs: &[Tensor],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (rows, dim) = qv.shape();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(rows, dim);
        let mut dk = Tensor::zeros(rows, dim);
        let mut dv = Tensor::zeros(rows, dim);
        for (s, seg) in segments.iter().enumerate() {
            for h in 0..heads {
                let p = &probs[s * heads + h];
                let c0 = h * dh;
                let n = seg.len;
                // dP_ij = dO_i · v_j
                let mut dp = Tensor::zeros(n, n);
                for i in 0..n {
                    let go = &g.row(seg.start + i)[c0..c0 + dh];
                    for j in 0..n {
                        if p.get(i, j) != 0.0 {
                            dp.set(i, j, dot(go, &vv.row(seg.start + j)[c0..c0 + dh]));
                        }
                    }
                }
                for i in 0..n {
                    let row_dot: f64 = (0..n).map(|j| p.get(i, j) * dp.get(i, j)).sum();
                    for j in 0..n {
                        let pij = p.get(i, j);
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = pij * (dp.get(i, j) - row_dot) * scale;
                        let (ri, rj) = (seg.start + i, seg.start + j);
                        for c in c0..c0 + dh {
                            let dqc = dq.get(ri, c) + ds * kv.get(rj, c);
                            dq.set(ri, c, dqc);
                            let dkc = dk.get(rj, c) + ds * qv.get(ri, c);
                            dk.set(rj, c, dkc);
                            let dvc = dv.get(rj, c) + pij * g.get(ri, c);
                            dv.set(rj, c, dvc);
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf; zeros when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<Tensor, GradError> {
        if v.graph != self.graph {
            return Err(GradError::ForeignVar);
        }
        let (r, c) = self.shapes[v.index];
        Ok(self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(r, c)))
    }

    /// Gradients of every named parameter, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, idx)| {
                let (r, c) = self.shapes[*idx];
                let g = self.grads[*idx].clone().unwrap_or_else(|| Tensor::zeros(r, c));
                (name.clone(), g)
            })
            .collect()
    }
}
