//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are appended to a [`Tape`] as they execute, so the node list is
//! already in topological order. [`Tape::backward`] walks it once in reverse,
//! routing adjoints to the inputs of each node and accumulating them into the
//! gradient buffers of leaves created with `requires_grad`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for a zero entry in a [`Tape::gather`] index list.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    Gather { x: usize, index: Vec<usize> },
    SegmentMax { x: usize, argmax: Vec<usize> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Custom { inputs: Vec<(usize, Vec<f64>)> },
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    let len = nodes[j].value.len();
    adj[j].get_or_insert_with(|| vec![0.0; len])
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Unary(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Gather { x, .. }
            | Op::SegmentMax { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
            Op::Custom { inputs } => inputs.iter().map(|(i, _)| *i).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A recorded computation. Confined to one thread; independent tapes can run
/// concurrently over shared read-only parameters.
#[derive(Debug, Clone, Default)]
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

    /// Adds a leaf. Leaves created with `requires_grad` own a zeroed gradient
    /// accumulator.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (`None` for non-leaves and constants).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Ok(Tensor::new(x.shape().to_vec(), data)?)
        } else if y.is_scalar() {
            let q = y.item();
            let data = x.data().iter().map(|&p| f(p, q)).collect();
            Ok(Tensor::new(x.shape().to_vec(), data)?)
        } else if x.is_scalar() {
            let p = x.item();
            let data = y.data().iter().map(|&q| f(p, q)).collect();
            Ok(Tensor::new(y.shape().to_vec(), data)?)
        } else {
            Err(self.shape_err(name, a, b))
        }
    }

    /// Elementwise sum; either operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    /// Hadamard product; either operand may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c || rv.rows() != 1 {
            return Err(self.shape_err(name, x, row));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(&p, &q)| f(p, q)))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// `x[n×k] + b[1×k]` applied to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, bias, |p, q| p + q)?;
        Ok(self.push(out, Op::AddRow(x.0, bias.0)))
    }

    /// `x[n×k] ⊙ g[1×k]` applied to every row.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, gain, |p, q| p * q)?;
        Ok(self.push(out, Op::MulRow(x.0, gain.0)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|p| p * factor).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x.0, factor))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&p| p <= 0.0 || p.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => libm::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |p| if p > 0.0 { p } else { 0.0 },
            Unary::Exp => libm::exp,
            Unary::Log => libm::log,
        };
        let data = v.data().iter().map(|&p| f(p)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Unary(x.0, kind)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(v.cols()) {
            crate::tensor::softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SoftmaxRows(x.0))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(v.cols()) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|p| *p -= lse);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmaxRows(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(self.shape_err("concat_cols", first, x));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        Ok(self.push(out, Op::ConcatCols(xs.iter().map(|v| v.0).collect())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| contract("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(self.shape_err("concat_rows", first, x));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data);
        Ok(self.push(out, Op::ConcatRows(xs.iter().map(|v| v.0).collect())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if len == 0 || start + len > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = (0..v.rows())
            .flat_map(|r| v.row_slice(r)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::matrix(v.rows(), len, data);
        Ok(self.push(out, Op::SliceCols { x: x.0, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if len == 0 || start + len > v.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = v.cols();
        let out = Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { x: x.0, start }))
    }

    /// `out.flat[k] = x.flat[index[k]]`, or zero where `index[k] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if index.len() != rows * cols {
            return Err(contract(format!(
                "gather index length {} does not match {rows}x{cols}",
                index.len()
            )));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < v.len() {
                data.push(v.data()[i]);
            } else {
                return Err(contract(format!("gather index {i} out of range {}", v.len())));
            }
        }
        let out = Tensor::matrix(rows, cols, data);
        Ok(self.push(out, Op::Gather { x: x.0, index }))
    }

    /// Selects whole rows of a matrix, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let c = self.value(x).cols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| if r == GATHER_ZERO { GATHER_ZERO } else { r * c + j }))
            .collect();
        self.gather(x, index, rows.len(), c)
    }

    /// Column-wise maximum over each `(start, len)` block of rows.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for &(start, len) in segments {
            if len == 0 || start + len > v.rows() {
                return Err(contract(format!(
                    "segment ({start}, {len}) outside {} rows",
                    v.rows()
                )));
            }
            for j in 0..c {
                let mut best = start * c + j;
                for r in start + 1..start + len {
                    let idx = r * c + j;
                    if v.data()[idx] > v.data()[best] {
                        best = idx;
                    }
                }
                data.push(v.data()[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::matrix(segments.len(), c, data);
        Ok(self.push(out, Op::SegmentMax { x: x.0, argmax }))
    }

    /// Normalizes each row to zero mean and unit variance (no gain or bias).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        for row in v.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            inv_std.push(s);
            data.extend(row.iter().map(|p| (p - mean) * s));
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LayerNorm { x: x.0, inv_std })
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to each input.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).len() != g.len() {
                return Err(contract("custom op gradient length mismatch"));
            }
        }
        let op = Op::Custom {
            inputs: inputs.into_iter().map(|(v, g)| (v.0, g)).collect(),
        };
        Ok(self.push(Tensor::scalar(value), op))
    }

    /// Propagates `∂root/∂·` to every reachable leaf with `requires_grad`,
    /// adding into its accumulator. Returns the number of nodes whose adjoint
    /// was processed.
    pub fn backward(&mut self, root: Var) -> Result<usize> {
        if !self.value(root).is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                if let Some(g) = self.nodes[i].grad.as_mut() {
                    g.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                }
                continue;
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(visited)
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(adj, nodes, $j)
            };
        }
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    matmul_bt_into(dy, bv.data(), acc!(*a), m, n, k);
                }
                if wants(*b) {
                    matmul_at_into(av.data(), dy, acc!(*b), m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (j, s) in [(*a, 1.0), (*b, sign)] {
                    if !wants(j) {
                        continue;
                    }
                    let g = acc!(j);
                    if g.len() == dy.len() {
                        g.iter_mut().zip(dy).for_each(|(p, q)| *p += s * q);
                    } else {
                        g[0] += s * dy.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if !wants(j) {
                        continue;
                    }
                    let ov = nodes[other].value.data();
                    let g = acc!(j);
                    if g.len() == dy.len() {
                        if ov.len() == dy.len() {
                            for k in 0..dy.len() {
                                g[k] += dy[k] * ov[k];
                            }
                        } else {
                            g.iter_mut().zip(dy).for_each(|(p, q)| *p += q * ov[0]);
                        }
                    } else {
                        g[0] += dy.iter().zip(ov).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = nodes[*b].value.len();
                if wants(*x) {
                    acc!(*x).iter_mut().zip(dy).for_each(|(p, q)| *p += q);
                }
                if wants(*b) {
                    let g = acc!(*b);
                    for row in dy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let rv = nodes[*r].value.data();
                let c = rv.len();
                if wants(*x) {
                    let g = acc!(*x);
                    for (k, q) in dy.iter().enumerate() {
                        g[k] += q * rv[k % c];
                    }
                }
                if wants(*r) {
                    let xv = nodes[*x].value.data();
                    let g = acc!(*r);
                    for (k, q) in dy.iter().enumerate() {
                        g[k % c] += q * xv[k];
                    }
                }
            }
            Op::Scale(x, f) => {
                acc!(*x).iter_mut().zip(dy).for_each(|(p, q)| *p += f * q);
            }
            Op::Unary(x, kind) => {
                let xv = nodes[*x].value.data();
                let yv = y.data();
                let g = acc!(*x);
                for k in 0..dy.len() {
                    let d = match kind {
                        Unary::Tanh => 1.0 - yv[k] * yv[k],
                        Unary::Sigmoid => yv[k] * (1.0 - yv[k]),
                        Unary::Relu => {
                            if xv[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => yv[k],
                        Unary::Log => 1.0 / xv[k],
                    };
                    g[k] += dy[k] * d;
                }
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let g = acc!(*x);
                for (r, (yr, dr)) in y.data().chunks(c).zip(dy.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        g[r * c + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let c = y.cols();
                let g = acc!(*x);
                for (r, (yr, dr)) in y.data().chunks(c).zip(dy.chunks(c)).enumerate() {
                    let total: f64 = dr.iter().sum();
                    for j in 0..c {
                        g[r * c + j] += dr[j] - libm::exp(yr[j]) * total;
                    }
                }
            }
            Op::Sum(x) => {
                acc!(*x).iter_mut().for_each(|p| *p += dy[0]);
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                let g = acc!(*x);
                for a in 0..r {
                    for b in 0..c {
                        g[b * r + a] += dy[a * c + b];
                    }
                }
            }
            Op::Reshape(x) => {
                acc!(*x).iter_mut().zip(dy).for_each(|(p, q)| *p += q);
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let mut offset = 0;
                for &j in xs {
                    let c = nodes[j].value.cols();
                    if wants(j) {
                        let g = acc!(j);
                        for r in 0..y.rows() {
                            for k in 0..c {
                                g[r * c + k] += dy[r * total + offset + k];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &j in xs {
                    let len = nodes[j].value.len();
                    if wants(j) {
                        acc!(j)
                            .iter_mut()
                            .zip(&dy[offset..offset + len])
                            .for_each(|(p, q)| *p += q);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let src_c = nodes[*x].value.cols();
                let c = y.cols();
                let g = acc!(*x);
                for r in 0..y.rows() {
                    for k in 0..c {
                        g[r * src_c + start + k] += dy[r * c + k];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * y.cols();
                acc!(*x)[off..off + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(p, q)| *p += q);
            }
            Op::Gather { x, index } => {
                let g = acc!(*x);
                for (k, &src) in index.iter().enumerate() {
                    if src != GATHER_ZERO {
                        g[src] += dy[k];
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let g = acc!(*x);
                for (k, &src) in argmax.iter().enumerate() {
                    g[src] += dy[k];
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let g = acc!(*x);
                for (r, (yr, dr)) in y.data().chunks(c).zip(dy.chunks(c)).enumerate() {
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = yr.iter().zip(dr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[r * c + j] += inv_std[r] * (dr[j] - mean_d - yr[j] * mean_dy);
                    }
                }
            }
            Op::Custom { inputs } => {
                for (j, grad) in inputs {
                    if wants(*j) {
                        acc!(*j).iter_mut().zip(grad).for_each(|(p, q)| *p += dy[0] * q);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut plus = x.clone();
                plus.data_mut()[k] += h;
                let mut minus = x.clone();
                minus.data_mut()[k] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Checks every input of a two-input scalar expression against finite differences.
    fn check2(
        a: Tensor,
        b: Tensor,
        build: &dyn Fn(&mut Tape, Var, Var) -> Var,
        tol: f64,
    ) {
        let eval = |x: &Tensor, y: &Tensor| {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(x.clone()), t.constant(y.clone()));
            let out = build(&mut t, va, vb);
            t.value(out).item()
        };
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
        let out = build(&mut t, va, vb);
        t.backward(out).unwrap();
        let na = numeric_grad(&a, 1e-5, &|x| eval(x, &b));
        let nb = numeric_grad(&b, 1e-5, &|y| eval(&a, y));
        for (an, nu) in t.grad(va).unwrap().iter().zip(&na) {
            assert!(rel_err(*an, *nu) < tol, "a: analytic {an} numeric {nu}");
        }
        for (an, nu) in t.grad(vb).unwrap().iter().zip(&nb) {
            assert!(rel_err(*an, *nu) < tol, "b: analytic {an} numeric {nu}");
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        check2(a.clone(), b.clone(), &|t, x, y| {
            let p = t.matmul(x, y).unwrap();
            t.sum(p)
        }, 1e-6);
        // d sum(ab)/da = ones(3,2)·bᵀ
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a, true), t.constant(b.clone()));
        let p = t.matmul(va, vb).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let expected = Tensor::filled(3, 2, 1.0).matmul(&b.transpose()).unwrap();
        for (g, e) in t.grad(va).unwrap().iter().zip(expected.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(4, 2));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.value(th).item(), 0.0);
        assert_eq!(t.value(sg).item(), 0.5);
    }

    #[test]
    fn tanh_derivative_at_point_three() {
        let x = 0.3;
        let mut t = Tape::new();
        let v = t.leaf(Tensor::scalar(x), true);
        let y = t.tanh(v);
        t.backward(y).unwrap();
        let h = 1e-5;
        let numeric = (libm::tanh(x + h) - libm::tanh(x - h)) / (2.0 * h);
        let analytic = t.grad(v).unwrap()[0];
        assert!((analytic - numeric).abs() / numeric.abs() < 1e-8);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(t.log(v), Err(Error::Domain { op: "log", .. })));
        let w = t.constant(Tensor::row(vec![1.0, -2.0]));
        assert!(t.log(w).is_err());
    }

    #[test]
    fn softmax_rows_properties() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let su = t.softmax_rows(u);
        for &p in t.value(su).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.constant(Tensor::row(vec![1000.0, 0.0, 0.0]));
        let sb = t.softmax_rows(big);
        let v = t.value(sb).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
        let r = random(1, 7, 9);
        let x = t.constant(r.clone());
        let s = t.softmax_rows(x);
        let total: f64 = t.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(t.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let w0 = Tensor::row(vec![0.5, -1.5, 2.0]);
        let mut t = Tape::new();
        let w = t.leaf(w0.clone(), true);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.leaf(w0.clone(), true);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let expected: Vec<f64> = w0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(w).unwrap(), expected.as_slice());
    }

    #[test]
    fn second_backward_doubles_leaf_grads() {
        let mut t = Tape::new();
        let a = t.leaf(random(2, 3, 4), true);
        let b = t.leaf(random(3, 2, 5), true);
        let p = t.matmul(a, b).unwrap();
        let q = t.tanh(p);
        let s = t.sum(q);
        t.backward(s).unwrap();
        let first: Vec<f64> = t.grad(a).unwrap().to_vec();
        t.backward(s).unwrap();
        for (g2, g1) in t.grad(a).unwrap().iter().zip(&first) {
            assert_eq!(*g2, 2.0 * g1);
        }
        t.zero_grads();
        assert!(t.grad(b).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_visits_each_reachable_node_once() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0), true);
        let b = t.mul(a, a).unwrap();
        let c = t.add(b, a).unwrap();
        let _unused = t.exp(a);
        let d = t.sum(c);
        // a, b, c, d reachable; the unused exp node is skipped.
        assert_eq!(t.backward(d).unwrap(), 4);
        assert_eq!(t.grad(a).unwrap(), &[5.0]);
    }

    #[test]
    fn composed_ops_gradcheck() {
        // Exercises every op kind against central differences.
        let a = random(3, 4, 11);
        let b = random(4, 4, 12);
        check2(a, b, &|t, x, y| {
            let m = t.matmul(x, y).unwrap();
            let th = t.tanh(m);
            let sg = t.sigmoid(x);
            let prod = t.mul(th, sg).unwrap();
            let row = t.slice_rows(y, 1, 1).unwrap();
            let biased = t.add_row(prod, row).unwrap();
            let gain = t.slice_rows(y, 2, 1).unwrap();
            let gained = t.mul_row(biased, gain).unwrap();
            let ln = t.layer_norm_rows(gained, 1e-12);
            let r = t.relu(ln);
            let e = t.exp(x);
            let sm = t.softmax_rows(e);
            let ls = t.log_softmax_rows(m);
            let cat = t.concat_cols(&[r, sm]).unwrap();
            let sl = t.slice_cols(cat, 2, 4).unwrap();
            let tr = t.transpose(sl);
            let lst = t.transpose(ls);
            let rows = t.concat_rows(&[tr, lst]).unwrap();
            let pooled = t.segment_max(rows, &[(0, 3), (3, 5)]).unwrap();
            let g = t.gather(ls, vec![0, 5, GATHER_ZERO, 11], 2, 2).unwrap();
            let gr = t.reshape(g, vec![1, 4]).unwrap();
            let sq = t.mul(pooled, pooled).unwrap();
            let s1 = t.sum(sq);
            let s2 = t.sum(gr);
            let half = t.scale(s2, 0.5);
            let diff = t.sub(s1, half).unwrap();
            let pos = t.exp(diff);
            let lg = t.log(pos).unwrap();
            let z = t.sum(lg);
            z
        }, 1e-4);
    }

    #[test]
    fn custom_scalar_scales_by_upstream() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let c = t.custom_scalar(3.0, vec![(x, vec![0.5, -1.0])]).unwrap();
        let y = t.scale(c, 4.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let a = random(2, 3, 21);
        let b = Tensor::scalar(0.7);
        check2(a, b, &|t, x, y| {
            let p = t.mul(x, y).unwrap();
            let q = t.add(p, y).unwrap();
            let r = t.sub(y, q).unwrap();
            let s = t.tanh(r);
            t.sum(s)
        }, 1e-6);
    }
}
