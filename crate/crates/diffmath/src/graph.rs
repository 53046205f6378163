//! Recording graph and reverse-mode differentiation.
//!
//! Every operation appends a node holding its cached output. Nodes are
//! appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] simply walks it in reverse,
//! visiting each node once.

use std::collections::HashMap;

use crate::linalg::gemm;
use crate::{MathError, ParamId, ParamStore, Result, Tensor};

const LEAKY_SLOPE: f64 = 0.01;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    /// Leaky ReLU with negative slope 0.01.
    LeakyRelu,
    Exp,
    Ln,
    /// `ln(1 + eˣ)`, evaluated without overflow.
    Softplus,
    Square,
    Neg,
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        }
    }

    /// Derivative given the input `x` and the cached output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct ParamKey {
    store: u64,
    id: ParamId,
}

#[derive(Debug)]
enum Op {
    /// Constant input or frozen parameter.
    Constant,
    /// Leaf whose gradient is reported by node id.
    Variable,
    Param,
    Dense { x: NodeId, w: NodeId, b: NodeId },
    /// `a · bᵀ`
    MatMulNt { a: NodeId, b: NodeId },
    Unary { x: NodeId, f: Unary },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    SubColumn { x: NodeId, v: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize },
    RowSums { x: NodeId },
    RowDot { a: NodeId, b: NodeId },
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    LogSumExpRows { x: NodeId, mask: Option<Vec<bool>> },
    SelectRows { x: NodeId, idx: Vec<usize> },
    Reshape { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    StopGradient,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-threaded operation recorder.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter of `store`, if it took part in the loss.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&ParamKey {
            store: store.tag(),
            id,
        })
    }

    pub(crate) fn all_params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Gradient reaching `node`; `None` when nothing flowed into it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(MathError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MathError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, n: NodeId) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Leaf that receives gradient, retrievable with [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Variable, value, true)
    }

    /// Trainable parameter. Reading the same parameter twice returns the
    /// same node, so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let key = ParamKey {
            store: store.tag(),
            id,
        };
        if let Some(&node) = self.params.get(&key) {
            return node;
        }
        let node = self.push(Op::Param, store.get(id).clone(), true);
        self.params.insert(key, node);
        node
    }

    /// Parameter value used as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.constant(store.get(id).clone())
    }

    /// `x · w + b` for `x: [B×I]`, `w: [I×O]`, `b: [O]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("dense", xv, 2)?;
        expect_rank("dense", wv, 2)?;
        if xv.shape()[1] != wv.shape()[0] {
            return Err(MathError::ShapeMismatch {
                op: "dense",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let (batch, inp, out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [out] {
            return Err(MathError::ShapeMismatch {
                op: "dense bias",
                left: wv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            data.extend_from_slice(bv.data());
        }
        gemm(batch, inp, out, xv.data(), false, wv.data(), false, 1.0, &mut data);
        let value = Tensor::new(vec![batch, out], data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Dense { x, w, b }, value, rg))
    }

    /// `a · bᵀ` for `a: [B×P]`, `b: [C×P]`, giving `[B×C]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul_nt", av, 2)?;
        expect_rank("matmul_nt", bv, 2)?;
        if av.shape()[1] != bv.shape()[1] {
            return Err(MathError::ShapeMismatch {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, 0.0, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNt { a, b }, value, rg))
    }

    pub fn unary(&mut self, x: NodeId, f: Unary) -> NodeId {
        let value = self.value(x).map(|v| f.eval(v));
        let rg = self.rg(x);
        self.push(Op::Unary { x, f }, value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::LeakyRelu)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Ln)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Neg)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("minimum", a, b, f64::min, Op::Minimum)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, value, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar { x }, value, rg)
    }

    /// `x[i, j] − v[i]` for `x: [B×C]`, `v: [B]`.
    pub fn sub_column(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xv, vv) = (self.value(x), self.value(v));
        expect_rank("sub_column", xv, 2)?;
        if vv.shape() != [xv.shape()[0]] {
            return Err(MathError::ShapeMismatch {
                op: "sub_column",
                left: xv.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let cols = xv.shape()[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e - vv.data()[i / cols])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Op::SubColumn { x, v }, value, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(MathError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            expect_rank("concat_cols", v, 2)?;
            if v.shape()[0] != rows {
                return Err(MathError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        expect_rank("slice_cols", xv, 2)?;
        if start > end || end > xv.shape()[1] {
            return Err(MathError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{end} outside {:?}", xv.shape()),
            });
        }
        let rows = xv.shape()[0];
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    /// Per-row sums: `[B×C] → [B]`.
    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        expect_rank("row_sums", xv, 2)?;
        let data = (0..xv.shape()[0]).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor::vector(data);
        let rg = self.rg(x);
        Ok(self.push(Op::RowSums { x }, value, rg))
    }

    /// Per-row dot products of two equally shaped matrices: `[B×P] → [B]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("row_dot", av, 2)?;
        same_shape("row_dot", av, bv)?;
        let data = (0..av.shape()[0])
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Tensor::vector(data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::RowDot { a, b }, value, rg))
    }

    /// Scales each row to unit L2 norm. Fails on rows with norm < 1e-12.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        expect_rank("normalize_rows", xv, 2)?;
        let rows = xv.shape()[0];
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_NORM {
                return Err(MathError::DegenerateVector {
                    op: "normalize_rows",
                    row: r,
                    norm,
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::NormalizeRows { x, norms }, value, rg))
    }

    /// Rowwise cosine similarity of two `[B×D]` matrices, giving `[B]`.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        self.row_dot(an, bn)
    }

    /// Cosine similarity of two vectors, as a scalar node.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("cosine_similarity", av, 1)?;
        same_shape("cosine_similarity", av, bv)?;
        let d = av.shape()[0];
        let a2 = self.reshape(a, vec![1, d])?;
        let b2 = self.reshape(b, vec![1, d])?;
        let c = self.cosine_rows(a2, b2)?;
        self.reshape(c, Vec::new())
    }

    /// Max-shifted `ln Σ exp` over each row of `[B×C]`, giving `[B]`.
    ///
    /// With a mask (row-major, `B×C`), only entries flagged `true`
    /// participate; every row needs at least one.
    pub fn logsumexp_rows(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let xv = self.value(x);
        expect_rank("logsumexp_rows", xv, 2)?;
        if let Some(m) = &mask {
            if m.len() != xv.numel() {
                return Err(MathError::InvalidArgument {
                    op: "logsumexp_rows",
                    reason: format!("mask has {} entries for shape {:?}", m.len(), xv.shape()),
                });
            }
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let row = xv.row(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(MathError::InvalidArgument {
                    op: "logsumexp_rows",
                    reason: format!("row {r} has no active entries"),
                });
            }
            let sum: f64 = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| (row[c] - max).exp())
                .sum();
            out.push(max + sum.ln());
        }
        let value = Tensor::vector(out);
        let rg = self.rg(x);
        Ok(self.push(Op::LogSumExpRows { x, mask }, value, rg))
    }

    /// Stable `ln Σ exp(xs)` of a non-empty vector, as a scalar node.
    pub fn logsumexp(&mut self, xs: NodeId) -> Result<NodeId> {
        let xv = self.value(xs);
        expect_rank("logsumexp", xv, 1)?;
        let n = xv.shape()[0];
        if n == 0 {
            return Err(MathError::InvalidArgument {
                op: "logsumexp",
                reason: "empty input".into(),
            });
        }
        let row = self.reshape(xs, vec![1, n])?;
        let l = self.logsumexp_rows(row, None)?;
        self.reshape(l, Vec::new())
    }

    /// Gathers rows (or elements of a vector) by index.
    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.rank() > 2 {
            return Err(MathError::Rank {
                op: "select_rows",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        let rows = xv.shape()[0];
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(MathError::InvalidArgument {
                    op: "select_rows",
                    reason: format!("row {i} out of {rows}"),
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, value, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(Op::Sum { x }, value, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(MathError::InvalidArgument {
                op: "mean",
                reason: "empty input".into(),
            });
        }
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Op::Mean { x }, value, rg))
    }

    /// Identity in the forward pass; blocks all gradient flow backwards.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Reverse-mode sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(MathError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = HashMap::new();
        for (key, node) in &self.params {
            if let Some(g) = grads.get(node.0).and_then(Option::as_ref) {
                params.insert(*key, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], node: NodeId, delta: Tensor) {
        if !self.nodes[node.0].requires_grad {
            return;
        }
        match &mut grads[node.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param | Op::StopGradient => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inp, out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(batch, out, inp, g.data(), false, wv.data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::matrix(batch, inp, dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(inp, batch, out, xv.data(), true, g.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::matrix(inp, out, dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out];
                    for r in 0..batch {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, db).unwrap());
                }
            }
            Op::Unary { x, f } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Vec::with_capacity(g.numel());
                let mut db = Vec::with_capacity(g.numel());
                for ((&x, &z), &gi) in av.data().iter().zip(bv.data()).zip(g.data()) {
                    if x <= z {
                        da.push(gi);
                        db.push(0.0);
                    } else {
                        da.push(0.0);
                        db.push(gi);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar { x } | Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape).unwrap());
            }
            Op::SubColumn { x, v } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*v) {
                    let d = (0..g.rows()).map(|r| -g.row(r).iter().sum::<f64>()).collect();
                    self.accumulate(grads, *v, Tensor::vector(d));
                }
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, w, d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let w = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::matrix(rows, cols, d).unwrap());
            }
            Op::RowSums { x } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let d = (0..xv.numel()).map(|k| g.data()[k / cols]).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.shape()[1];
                if self.rg(*a) {
                    let d = (0..av.numel())
                        .map(|k| g.data()[k / cols] * bv.data()[k])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = (0..bv.numel())
                        .map(|k| g.data()[k / cols] * av.data()[k])
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::NormalizeRows { x, norms } => {
                // d x = (g − y ⟨g, y⟩) / ‖x‖
                let cols = y.shape()[1];
                let mut d = Vec::with_capacity(y.numel());
                for (r, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend((0..cols).map(|c| (gr[c] - yr[c] * proj) / norm));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSumExpRows { x, mask } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let lse = y.data()[r];
                    for c in 0..cols {
                        let k = r * cols + c;
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            d[k] = g.data()[r] * (xv.data()[k] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for (out_row, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] += g.data()[out_row * cols + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let n = xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item() / n));
            }
        }
    }
}
