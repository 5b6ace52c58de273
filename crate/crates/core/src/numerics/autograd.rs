//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Only the handful of operations the engine needs are registered. Leaves are
//! either trainable parameters, frozen weights, or constants; frozen and
//! constant leaves never accumulate gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Leaf {
    Param,
    Frozen,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Leaf),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Silu(NodeId),
    CausalSoftmax(NodeId),
    RmsNorm(NodeId, f64),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    CrossEntropy(NodeId, Vec<Option<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build it forward, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    /// Elements held by computed (non-leaf) nodes.
    pub fn activation_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf(_)))
            .map(|n| n.value.numel())
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let name = name.into();
        let id = self.push(value, Op::Leaf(Leaf::Param), true);
        self.names.insert(name, id);
        id
    }

    /// Registers a named leaf that must never receive gradients.
    pub fn frozen(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let name = name.into();
        let id = self.push(value, Op::Leaf(Leaf::Frozen), false);
        self.names.insert(name, id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf(Leaf::Constant), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    /// Row-wise softmax of an `m×n` score matrix under a causal mask: row `i`
    /// sees columns `0..=i + (n - m)`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if shape.len() != 2 || shape[1] < shape[0] {
            return Err(Error::dim("causal_softmax", &shape, &[0, 0]));
        }
        let (m, n) = (shape[0], shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let visible = i + (n - m) + 1;
            let row = &x.data()[i * n..i * n + visible];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (j, &s) in row.iter().enumerate() {
                let e = (s - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for o in &mut out[i * n..i * n + visible] {
                *o /= denom;
            }
        }
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::CausalSoftmax(a), rg))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` with unit gain.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let x = self.value(a).as_matrix()?;
        let n = x.cols();
        let mut out = x.clone();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            let r = rms(x.row(i), eps);
            for v in row {
                *v /= r;
            }
        }
        let out = out.reshape(self.value(a).shape())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RmsNorm(a, eps), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape().len() != 2 || start > end || end > x.cols() {
            return Err(Error::dim("slice_cols", x.shape(), &[start, end]));
        }
        let (m, w) = (x.rows(), end - start);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let v = Tensor::new(vec![m, w], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start, end), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim("concat_cols", s, &[m, 0]));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    /// Mean token cross-entropy over rows that carry a target. Rows with
    /// `None` are masked out; with no targets at all the loss is zero.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let x = self.value(logits);
        if x.shape().len() != 2 || x.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", x.shape(), &[targets.len()]));
        }
        let v = x.cols();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Vocabulary { token: t, vocab: v });
                }
                let row = x.row(i);
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to the named parameters.
    pub fn backward(&self, loss: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            let id = *self
                .names
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if !matches!(self.nodes[id.0].op, Op::Leaf(Leaf::Param)) {
                return Err(Error::FrozenParameter(name.to_string()));
            }
            targets.push((name, id));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in targets {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| self.value(id);
        Ok(match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.matmul(&val(*b).transpose()?)?));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, val(*a).transpose()?.matmul(g)?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![(*a, g.mul(&d)?)]
            }
            Op::CausalSoftmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (&p, &q)| acc + p * q);
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), d)?)]
            }
            Op::RmsNorm(a, eps) => {
                let x = val(*a).as_matrix()?;
                let y = node.value.as_matrix()?;
                let gm = g.as_matrix()?;
                let n = x.cols();
                let mut d = vec![0.0; x.numel()];
                for i in 0..x.rows() {
                    let r = rms(x.row(i), *eps);
                    let yr = y.row(i);
                    let gr = gm.row(i);
                    let mean = yr.iter().zip(gr).fold(0.0, |acc, (&p, &q)| acc + p * q) / n as f64;
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * mean) / r;
                    }
                }
                vec![(*a, Tensor::new(val(*a).shape().to_vec(), d)?)]
            }
            Op::SliceCols(a, start, end) => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.shape());
                let n = src.cols();
                let w = end - start;
                let dd = d.data_mut();
                for i in 0..src.rows() {
                    dd[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, d)]
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        data.extend_from_slice(
                            &g.data()[i * total + offset..i * total + offset + w],
                        );
                    }
                    out.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                    offset += w;
                }
                out
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0]))],
            Op::CrossEntropy(a, targets) => {
                let x = val(*a);
                let v = x.cols();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut d = vec![0.0; x.numel()];
                if count > 0 {
                    let s = g.data()[0] / count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = x.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            d[i * v + j] = s * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
        })
    }
}

fn rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().fold(0.0, |acc, &v| acc + v * v) / row.len() as f64;
    (ms + eps).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s = row.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
    max + s.ln()
}

/// Builds a computation with `f` over the given parameters and returns the
/// gradient of its scalar result with respect to each of them.
pub fn grad<F>(params: &BTreeMap<String, Tensor>, f: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: BTreeMap<String, NodeId> = params
        .iter()
        .map(|(k, v)| (k.clone(), g.param(k.clone(), v.clone())))
        .collect();
    let out = f(&mut g, &ids)?;
    let names: Vec<&str> = params.keys().map(String::as_str).collect();
    g.backward(out, &names)
}
