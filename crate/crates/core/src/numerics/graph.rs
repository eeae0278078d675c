//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every node is evaluated when it is
//! inserted, so shapes are known (and checked) at construction time and the
//! insertion order is a valid topological order. Leaves can be rebound with
//! [`Graph::set_leaf`] followed by [`Graph::recompute`], which replays the
//! tape; this is how [`grad_check`] perturbs inputs.

use std::collections::BTreeMap;

use super::linalg::{cholesky_factor, inverse, solve_upper};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: Option<String>, trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Inverse(NodeId),
    Cholesky(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Slice { src: NodeId, rows: std::ops::Range<usize>, cols: std::ops::Range<usize> },
    SumAll(NodeId),
    SumSquares(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
    Diag(NodeId),
    AddColBroadcast(NodeId, NodeId),
    LagStack { src: NodeId, lags: usize },
    AvgPool { src: NodeId, size: usize },
    MaxPool { src: NodeId, size: usize },
    KronEye { src: NodeId, n: usize },
    FlattenTimeMajor(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached by the backward pass.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Named leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> NodeId {
        self.push_leaf(Some(name.into()), value, trainable)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.leaf(name, value, true)
    }

    /// Anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(None, value, false)
    }

    fn push_leaf(&mut self, name: Option<String>, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { name, trainable },
            value,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaves in insertion order.
    pub fn trainable_leaves(&self) -> Vec<(NodeId, String)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf {
                    name,
                    trainable: true,
                } => Some((NodeId(i), name.clone().unwrap_or_else(|| format!("#{i}")))),
                _ => None,
            })
            .collect()
    }

    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::shape("set_leaf", format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = self.evaluate(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.evaluate(&op)?;
        let needs_grad = inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Inverse(a))
    }

    /// Upper-triangular factor of the symmetric part of `a`.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Cholesky(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice(
        &mut self,
        src: NodeId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        self.push(Op::Slice { src, rows, cols })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumSquares(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, label })
    }

    /// Column vector → diagonal matrix.
    pub fn diag(&mut self, v: NodeId) -> Result<NodeId> {
        self.push(Op::Diag(v))
    }

    /// Adds column vector `v` to every column of `m`.
    pub fn add_col_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.push(Op::AddColBroadcast(m, v))
    }

    /// Stacks `lags` delayed copies of a c×N signal, oldest first, with
    /// zeros before the start of the signal: block j holds x shifted right
    /// by `lags − 1 − j` samples.
    pub fn lag_stack(&mut self, src: NodeId, lags: usize) -> Result<NodeId> {
        self.push(Op::LagStack { src, lags })
    }

    pub fn avg_pool(&mut self, src: NodeId, size: usize) -> Result<NodeId> {
        self.push(Op::AvgPool { src, size })
    }

    pub fn max_pool(&mut self, src: NodeId, size: usize) -> Result<NodeId> {
        self.push(Op::MaxPool { src, size })
    }

    pub fn kron_eye(&mut self, src: NodeId, n: usize) -> Result<NodeId> {
        self.push(Op::KronEye { src, n })
    }

    /// c×N signal → (c·N)×1 vector with index t·c + channel.
    pub fn flatten_time_major(&mut self, src: NodeId) -> Result<NodeId> {
        self.push(Op::FlattenTimeMajor(src))
    }

    fn evaluate(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Scale(a, s) => v(a).scale(*s),
            Op::Transpose(a) => v(a).transpose(),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
            Op::Inverse(a) => inverse(v(a))?,
            Op::Cholesky(a) => {
                let s = v(a);
                if !s.is_square() {
                    return Err(Error::shape("cholesky", format!("{:?}", s.shape())));
                }
                cholesky_factor(&s.symmetrized())?
            }
            Op::ConcatRows(parts) => Tensor::concat_rows(&parts.iter().map(v).collect::<Vec<_>>())?,
            Op::ConcatCols(parts) => Tensor::concat_cols(&parts.iter().map(v).collect::<Vec<_>>())?,
            Op::Slice { src, rows, cols } => v(src).slice(rows.clone(), cols.clone())?,
            Op::SumAll(a) => Tensor::column(&[v(a).sum()]),
            Op::SumSquares(a) => Tensor::column(&[v(a).data().iter().map(|x| x * x).sum()]),
            Op::SoftmaxCrossEntropy { logits, label } => {
                let z = v(logits);
                if z.cols() != 1 || *label >= z.rows() {
                    return Err(Error::shape(
                        "softmax_cross_entropy",
                        format!("logits {:?}, label {label}", z.shape()),
                    ));
                }
                Tensor::column(&[cross_entropy_value(z.data(), *label)])
            }
            Op::Diag(a) => {
                let x = v(a);
                if x.cols() != 1 {
                    return Err(Error::shape("diag", format!("expected column, got {:?}", x.shape())));
                }
                Tensor::diag_from(x.data())
            }
            Op::AddColBroadcast(m, b) => {
                let (m, b) = (v(m), v(b));
                if b.cols() != 1 || b.rows() != m.rows() {
                    return Err(Error::shape(
                        "add_col_broadcast",
                        format!("{:?} + {:?}", m.shape(), b.shape()),
                    ));
                }
                let mut out = m.clone();
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        out[(i, j)] += b[(i, 0)];
                    }
                }
                out
            }
            Op::LagStack { src, lags } => lag_stack(v(src), *lags)?,
            Op::AvgPool { src, size } => avg_pool(v(src), *size)?,
            Op::MaxPool { src, size } => max_pool(v(src), *size)?.0,
            Op::KronEye { src, n } => v(src).kron_eye(*n),
            Op::FlattenTimeMajor(a) => {
                let x = v(a);
                x.transpose().reshape(x.len(), 1)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op_name(op) });
        }
        Ok(out)
    }

    /// Reverse pass from a scalar node. Adjoints are produced for every node
    /// that depends on a trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Adjoints> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", format!("loss is {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Tensor| -> Result<()> {
            if !self.nodes[id.0].needs_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(&v(b).transpose())?)?;
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, v(a).t_matmul(g)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Relu(a) => {
                let mask = v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g.hadamard(&mask)?)?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(out)?)?,
            Op::Clamp(a, lo, hi) => {
                let mask = v(a).map(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                acc(*a, g.hadamard(&mask)?)?;
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  Ā = −A⁻ᵀ Ḡ A⁻ᵀ
                let inv_t = out.transpose();
                acc(*a, inv_t.matmul(g)?.matmul(&inv_t)?.scale(-1.0))?;
            }
            Op::Cholesky(a) => acc(*a, cholesky_adjoint(out, g)?)?,
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let (r, _) = self.shape(*p);
                    acc(*p, g.slice(r0..r0 + r, 0..g.cols())?)?;
                    r0 += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let (_, c) = self.shape(*p);
                    acc(*p, g.slice(0..g.rows(), c0..c0 + c)?)?;
                    c0 += c;
                }
            }
            Op::Slice { src, rows, cols } => {
                let (r, c) = self.shape(*src);
                let mut full = Tensor::zeros(r, c);
                full.set_block(rows.start, cols.start, g);
                acc(*src, full)?;
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g[(0, 0)]))?;
            }
            Op::SumSquares(a) => acc(*a, v(a).scale(2.0 * g[(0, 0)]))?,
            Op::SoftmaxCrossEntropy { logits, label } => {
                let mut p = softmax(v(logits).data());
                p[*label] -= 1.0;
                acc(*logits, Tensor::column(&p).scale(g[(0, 0)]))?;
            }
            Op::Diag(a) => acc(*a, Tensor::column(&g.diagonal()))?,
            Op::AddColBroadcast(m, b) => {
                acc(*m, g.clone())?;
                let sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                acc(*b, Tensor::column(&sums))?;
            }
            Op::LagStack { src, lags } => {
                let (c, n) = self.shape(*src);
                let mut dx = Tensor::zeros(c, n);
                for j in 0..*lags {
                    let shift = lags - 1 - j;
                    for ch in 0..c {
                        for k in shift..n {
                            dx[(ch, k - shift)] += g[(j * c + ch, k)];
                        }
                    }
                }
                acc(*src, dx)?;
            }
            Op::AvgPool { src, size } => {
                let (c, n) = self.shape(*src);
                let mut dx = Tensor::zeros(c, n);
                let w = 1.0 / *size as f64;
                for ch in 0..c {
                    for t in 0..n {
                        dx[(ch, t)] = g[(ch, t / size)] * w;
                    }
                }
                acc(*src, dx)?;
            }
            Op::MaxPool { src, size } => {
                let (c, n) = self.shape(*src);
                let (_, argmax) = max_pool(v(src), *size)?;
                let mut dx = Tensor::zeros(c, n);
                for ch in 0..c {
                    for k in 0..n / size {
                        dx[(ch, argmax[ch * (n / size) + k])] += g[(ch, k)];
                    }
                }
                acc(*src, dx)?;
            }
            Op::KronEye { src, n } => {
                let (r, c) = self.shape(*src);
                let mut d = Tensor::zeros(r, c);
                for k in 0..*n {
                    d.add_assign(&g.slice(k * r..(k + 1) * r, k * c..(k + 1) * c)?)?;
                }
                acc(*src, d)?;
            }
            Op::FlattenTimeMajor(a) => {
                let (c, n) = self.shape(*a);
                acc(*a, g.clone().reshape(n, c)?.transpose())?;
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::MatMul(a, b) | Op::AddColBroadcast(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Clamp(a, _, _)
        | Op::Inverse(a)
        | Op::Cholesky(a)
        | Op::SumAll(a)
        | Op::SumSquares(a)
        | Op::Diag(a)
        | Op::FlattenTimeMajor(a) => vec![*a],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::Slice { src, .. }
        | Op::LagStack { src, .. }
        | Op::AvgPool { src, .. }
        | Op::MaxPool { src, .. }
        | Op::KronEye { src, .. } => vec![*src],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::MatMul(..) => "matmul",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Clamp(..) => "clamp",
        Op::Inverse(..) => "inverse",
        Op::Cholesky(..) => "cholesky",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Slice { .. } => "slice",
        Op::SumAll(..) => "sum_all",
        Op::SumSquares(..) => "sum_squares",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Diag(..) => "diag",
        Op::AddColBroadcast(..) => "add_col_broadcast",
        Op::LagStack { .. } => "lag_stack",
        Op::AvgPool { .. } => "avg_pool",
        Op::MaxPool { .. } => "max_pool",
        Op::KronEye { .. } => "kron_eye",
        Op::FlattenTimeMajor(..) => "flatten_time_major",
    }
}

/// Adjoint of `R = chol(sym(S))` with `RᵀR = sym(S)`.
///
/// With `L = Rᵀ` and `Φ` taking the lower triangle with halved diagonal,
/// `S̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)`.
fn cholesky_adjoint(r: &Tensor, r_bar: &Tensor) -> Result<Tensor> {
    let n = r.rows();
    let mut phi = r.matmul(&r_bar.transpose())?;
    for i in 0..n {
        phi[(i, i)] *= 0.5;
        for j in i + 1..n {
            phi[(i, j)] = 0.0;
        }
    }
    // L⁻ᵀ = R⁻¹ and L⁻¹ = R⁻ᵀ.
    let left = solve_upper(r, &phi)?;
    let s_bar = solve_upper(r, &left.transpose())?.transpose();
    Ok(s_bar.add(&s_bar.transpose())?.scale(0.5))
}

pub(crate) fn lag_stack(x: &Tensor, lags: usize) -> Result<Tensor> {
    if lags == 0 {
        return Err(Error::shape("lag_stack", "zero lags"));
    }
    let (c, n) = x.shape();
    let mut out = Tensor::zeros(lags * c, n);
    for j in 0..lags {
        let shift = lags - 1 - j;
        for ch in 0..c {
            for k in shift..n {
                out[(j * c + ch, k)] = x[(ch, k - shift)];
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool(x: &Tensor, size: usize) -> Result<Tensor> {
    let (c, n) = x.shape();
    if size == 0 || n % size != 0 {
        return Err(Error::shape("avg_pool", format!("length {n} not divisible by {size}")));
    }
    let mut out = Tensor::zeros(c, n / size);
    for ch in 0..c {
        for k in 0..n / size {
            let s: f64 = (0..size).map(|j| x[(ch, k * size + j)]).sum();
            out[(ch, k)] = s / size as f64;
        }
    }
    Ok(out)
}

/// Non-overlapping max pooling; also returns the (first) argmax index per output.
pub(crate) fn max_pool(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, n) = x.shape();
    if size == 0 || n % size != 0 {
        return Err(Error::shape("max_pool", format!("length {n} not divisible by {size}")));
    }
    let m = n / size;
    let mut out = Tensor::zeros(c, m);
    let mut arg = vec![0; c * m];
    for ch in 0..c {
        for k in 0..m {
            let mut best = k * size;
            for t in k * size + 1..(k + 1) * size {
                if x[(ch, t)] > x[(ch, best)] {
                    best = t;
                }
            }
            out[(ch, k)] = x[(ch, best)];
            arg[ch * m + k] = best;
        }
    }
    Ok((out, arg))
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(z)[label]` with max subtraction.
pub fn cross_entropy_value(z: &[f64], label: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Forward value and gradients of every trainable leaf, keyed by leaf name.
pub fn eval_and_grad(g: &Graph, loss: NodeId) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let adj = g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (id, name) in g.trainable_leaves() {
        let (r, c) = g.shape(id);
        let grad = adj.get(id).cloned().unwrap_or_else(|| Tensor::zeros(r, c));
        grads.insert(name, grad);
    }
    Ok((g.value(loss)[(0, 0)], grads))
}

/// Largest relative discrepancy between reverse-mode and central-difference
/// gradients over every trainable scalar: `|g_ad − g_fd| / max(1, |g_fd|)`.
pub fn grad_check(g: &Graph, loss: NodeId, h: f64) -> Result<f64> {
    let adj = g.backward(loss)?;
    let mut work = g.clone();
    let mut worst: f64 = 0.0;
    for (id, _) in g.trainable_leaves() {
        let base = g.value(id).clone();
        let analytic = adj
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.rows(), base.cols()));
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += h;
            work.set_leaf(id, plus)?;
            work.recompute()?;
            let f_plus = work.value(loss)[(0, 0)];
            let mut minus = base.clone();
            minus.data_mut()[k] -= h;
            work.set_leaf(id, minus)?;
            work.recompute()?;
            let f_minus = work.value(loss)[(0, 0)];
            let fd = (f_plus - f_minus) / (2.0 * h);
            let err = (analytic.data()[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        work.set_leaf(id, base)?;
    }
    work.recompute()?;
    Ok(worst)
}
