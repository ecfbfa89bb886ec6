//! Define-by-run computation graph with eager forward values and a single
//! reverse sweep.
//!
//! Every tensor is viewed as a row-major matrix whose last axis is the
//! column axis: `softmax`, `concat` and `slice` act along it, `matmul`
//! requires exactly two axes. Elementwise binary ops accept identical
//! shapes or a one-element operand on either side.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Op tags accepted by [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Sum,
    Mean,
    Square,
    Abs,
    Neg,
    /// Columns `start..end` of the last axis.
    Slice { start: usize, end: usize },
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses a tag; slices are written `slice:start:end`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "concat" => OpKind::Concat,
            "relu" => OpKind::Relu,
            "elu" => OpKind::Elu,
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "softmax" => OpKind::Softmax,
            "log" => OpKind::Log,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "square" => OpKind::Square,
            "abs" => OpKind::Abs,
            "neg" => OpKind::Neg,
            other => {
                let mut parts = other.split(':');
                match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some("slice"), Some(a), Some(b), None) => {
                        let start = a.parse().map_err(|_| Error::UnknownOp(s.into()))?;
                        let end = b.parse().map_err(|_| Error::UnknownOp(s.into()))?;
                        OpKind::Slice { start, end }
                    }
                    _ => return Err(Error::UnknownOp(s.into())),
                }
            }
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Log,
    Square,
    Abs,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Unary(Unary, Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Slice { input: Var, start: usize, end: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Unary(_, a) | Op::Softmax(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
        }
    }
}

/// Deliberate backward-pass defects, used to prove the gradient checker
/// actually catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    EluBackwardSign,
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu-sign" => Ok(Fault::EluBackwardSign),
            _ => Err(Error::InvalidConfig(format!("unknown fault `{s}`"))),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape. Node ids are assigned in creation order, so inputs
/// always precede their consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("fault", &self.fault)
            .finish()
    }
}

pub const ELU_ALPHA: f64 = 1.0;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let len: usize = shape.iter().product();
    match len.checked_div(cols) {
        Some(rows) => (rows, cols),
        None => (0, 0),
    }
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        ELU_ALPHA * x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Registers a leaf holding a copy of `t`'s values.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.value().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != value.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape.to_vec(), value, false, Op::Leaf))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![1], vec![x], false, Op::Leaf)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// The only element of a one-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient written by the last [`Graph::backward`]; zeros if the node
    /// was not reached.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = self.node(v);
        if n.grad.is_empty() {
            vec![0.0; n.value.len()]
        } else {
            n.grad.clone()
        }
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    op: "arity",
                    lhs: vec![n],
                    rhs: vec![inputs.len()],
                })
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Slice { start, end } => {
                arity(1)?;
                self.slice(inputs[0], start, end)
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.unary(Unary::Relu, inputs[0]))
            }
            OpKind::Elu => {
                arity(1)?;
                Ok(self.unary(Unary::Elu, inputs[0]))
            }
            OpKind::Tanh => {
                arity(1)?;
                Ok(self.unary(Unary::Tanh, inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.unary(Unary::Sigmoid, inputs[0]))
            }
            OpKind::Log => {
                arity(1)?;
                Ok(self.unary(Unary::Log, inputs[0]))
            }
            OpKind::Square => {
                arity(1)?;
                Ok(self.unary(Unary::Square, inputs[0]))
            }
            OpKind::Abs => {
                arity(1)?;
                Ok(self.unary(Unary::Abs, inputs[0]))
            }
            OpKind::Neg => {
                arity(1)?;
                Ok(self.unary(Unary::Neg, inputs[0]))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || lb == 1 {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = match (av.len(), bv.len()) {
            (x, y) if x == y => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            (_, 1) => av.iter().map(|x| f(*x, bv[0])).collect(),
            _ => bv.iter().map(|y| f(av[0], *y)).collect(),
        };
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    /// Concatenation along the last axis; all inputs need the same row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let rows = rows_cols(self.shape(xs[0])).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        Ok(self.push(vec![rows, total], out, rg, Op::Concat(xs.to_vec())))
    }

    /// Columns `start..end` along the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start >= end || end > cols {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![rows, w],
            out,
            rg,
            Op::Slice {
                input: x,
                start,
                end,
            },
        ))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Elu => elu,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::Neg => |x| -x,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, rg, Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(Unary::Elu, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &y) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (y - m).exp();
                z += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, rg, Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    // Composites built only from the primitive ops above.

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    /// `[rows, cols] -> [rows, 1]` via multiplication by a ones column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let ones = self.constant(&[cols, 1], vec![1.0; cols])?;
        self.matmul(x, ones)
    }

    /// `[rows, 1] -> [rows, n]` by repeating the single column.
    pub fn repeat_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let ones = self.constant(&[1, n], vec![1.0; n])?;
        self.matmul(x, ones)
    }

    /// `[1, cols] -> [rows, cols]` by repeating the single row.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(&[rows, 1], vec![1.0; rows])?;
        self.matmul(ones, x)
    }

    /// Picks column `idx[r]` of each row: `[rows, cols] -> [rows, 1]`.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::ShapeMismatch {
                op: "select_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut mask = vec![0.0; rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            mask[r * cols + i] = 1.0;
        }
        let m = self.constant(&[rows, cols], mask)?;
        let picked = self.mul(x, m)?;
        self.row_sum(picked)
    }

    /// Resets gradients, seeds `root` with 1 and sweeps the tape once in
    /// reverse creation order. Gradients from several consumers add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let len = self.node(root).value.len();
        if len != 1 {
            return Err(Error::NonScalarRoot(len));
        }
        for n in &mut self.nodes {
            n.grad.clear();
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = vec![1.0];
        for id in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            if !node.requires_grad || node.grad.is_empty() {
                continue;
            }
            propagate(before, node, self.fault);
        }
        Ok(())
    }

    /// Ids of every input of `v`, for topology checks.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.node(v).op.inputs()
    }
}

fn grad_buf(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    if n.grad.is_empty() {
        n.grad = vec![0.0; n.value.len()];
    }
    Some(&mut n.grad)
}

/// Accumulates `g` (shaped like the output) into input `v`, summing when
/// `v` was a broadcast scalar.
fn accumulate(nodes: &mut [Node], v: Var, g: impl Iterator<Item = f64>) {
    if let Some(buf) = grad_buf(nodes, v) {
        if buf.len() == 1 {
            buf[0] += g.sum::<f64>();
        } else {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

fn broadcast_get(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn propagate(before: &mut [Node], node: &Node, fault: Option<Fault>) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let n = g.len();
            if a.0 == b.0 {
                accumulate(before, *a, g.iter().map(|x| 2.0 * x));
            } else {
                accumulate(before, *a, g.iter().copied().take(n));
                accumulate(before, *b, g.iter().copied().take(n));
            }
        }
        Op::Mul(a, b) => {
            let av = before[a.0].value.clone();
            let bv = before[b.0].value.clone();
            accumulate(
                before,
                *a,
                g.iter().enumerate().map(|(i, x)| x * broadcast_get(&bv, i)),
            );
            accumulate(
                before,
                *b,
                g.iter().enumerate().map(|(i, x)| x * broadcast_get(&av, i)),
            );
        }
        Op::MatMul(a, b) => {
            let (m, k) = (before[a.0].shape[0], before[a.0].shape[1]);
            let n = before[b.0].shape[1];
            if before[a.0].requires_grad {
                let bv = &before[b.0].value;
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] = g[i * n..(i + 1) * n]
                            .iter()
                            .zip(brow)
                            .map(|(x, y)| x * y)
                            .sum();
                    }
                }
                accumulate(before, *a, ga.into_iter());
            }
            if before[b.0].requires_grad {
                let av = &before[a.0].value;
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += x * y;
                        }
                    }
                }
                accumulate(before, *b, gb.into_iter());
            }
        }
        Op::Concat(xs) => {
            let rows = rows_cols(&node.shape).0;
            let total = rows_cols(&node.shape).1;
            let mut offset = 0;
            for &x in xs {
                let w = rows_cols(&before[x.0].shape).1;
                let part: Vec<f64> = (0..rows)
                    .flat_map(|r| g[r * total + offset..r * total + offset + w].iter().copied())
                    .collect();
                accumulate(before, x, part.into_iter());
                offset += w;
            }
        }
        Op::Slice { input, start, end } => {
            let (rows, cols) = rows_cols(&before[input.0].shape);
            let w = end - start;
            let mut full = vec![0.0; rows * cols];
            for r in 0..rows {
                full[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(before, *input, full.into_iter());
        }
        Op::Unary(kind, x) => {
            let xv = &before[x.0].value;
            let yv = &node.value;
            let d: Vec<f64> = match kind {
                Unary::Relu => xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
                Unary::Elu => {
                    let sign = if fault == Some(Fault::EluBackwardSign) {
                        -1.0
                    } else {
                        1.0
                    };
                    xv.iter()
                        .zip(yv)
                        .zip(g)
                        .map(|((&x, &y), &g)| {
                            if x >= 0.0 {
                                g
                            } else {
                                sign * g * (y + ELU_ALPHA)
                            }
                        })
                        .collect()
                }
                Unary::Tanh => yv.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect(),
                Unary::Sigmoid => yv.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
                Unary::Log => xv.iter().zip(g).map(|(x, g)| g / x).collect(),
                Unary::Square => xv.iter().zip(g).map(|(x, g)| 2.0 * x * g).collect(),
                Unary::Abs => xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Unary::Neg => g.iter().map(|g| -g).collect(),
            };
            accumulate(before, *x, d.into_iter());
        }
        Op::Softmax(x) => {
            let (rows, cols) = rows_cols(&node.shape);
            let y = &node.value;
            let mut d = vec![0.0; y.len()];
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                for i in s {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            accumulate(before, *x, d.into_iter());
        }
        Op::Sum(x) => {
            let n = before[x.0].value.len();
            accumulate(before, *x, std::iter::repeat_n(g[0], n));
        }
        Op::Mean(x) => {
            let n = before[x.0].value.len();
            let gi = g[0] / n as f64;
            accumulate(before, *x, std::iter::repeat_n(gi, n));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph, shape: &[usize], v: Vec<f64>) -> Var {
        let t = Tensor::new(shape.to_vec(), v).unwrap().with_grad();
        g.leaf(&t)
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = var(&mut g, &[1, 2], vec![1.0, 2.0]);
        let b = var(&mut g, &[2, 1], vec![3.0, 4.0]);
        let c = g.forward_op(OpKind::MatMul, &[a, b]).unwrap();
        assert_eq!(g.value(c), &[11.0]);
        assert_eq!(g.shape(c), &[1, 1]);
    }

    #[test]
    fn relu_and_softmax() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], vec![-1.0, 0.0, 2.0]);
        let r = g.forward_op("relu".parse().unwrap(), &[x]).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = var(&mut g, &[1, 2], vec![0.0, 0.0]);
        let s = g.forward_op(OpKind::Softmax, &[z]).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn unknown_tag_and_bad_shapes() {
        assert!(matches!("conv2d".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        assert_eq!(
            "slice:1:3".parse::<OpKind>().unwrap(),
            OpKind::Slice { start: 1, end: 3 }
        );
        let mut g = Graph::new();
        let a = var(&mut g, &[1, 2], vec![1.0, 2.0]);
        let b = var(&mut g, &[3, 1], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], vec![1.0, 2.0]);
        let sq = g.square(x);
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1], vec![3.0]);
        let y = var(&mut g, &[1], vec![5.0]);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x), vec![5.0]);
        assert_eq!(g.grad(y), vec![3.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(2))));
    }

    #[test]
    fn fan_out_accumulates() {
        // x used by three consumers vs three independent copies of x.
        let mut g = Graph::new();
        let x = var(&mut g, &[2], vec![0.3, -1.2]);
        let a = g.tanh(x);
        let b = g.square(x);
        let c = g.mul(x, a).unwrap();
        let ab = g.add(a, b).unwrap();
        let abc = g.add(ab, c).unwrap();
        let root = g.sum(abc);
        g.backward(root).unwrap();
        let shared = g.grad(x);

        let mut h = Graph::new();
        let x1 = var(&mut h, &[2], vec![0.3, -1.2]);
        let x2 = var(&mut h, &[2], vec![0.3, -1.2]);
        let x3 = var(&mut h, &[2], vec![0.3, -1.2]);
        let x4 = var(&mut h, &[2], vec![0.3, -1.2]);
        let a = h.tanh(x1);
        let b = h.square(x2);
        let a2 = h.tanh(x4);
        let a2 = h.detach(a2);
        let c = h.mul(x3, a2).unwrap();
        let a3 = h.tanh(x4);
        let x3d = h.detach(x3);
        let c2 = h.mul(x3d, a3).unwrap();
        let ab = h.add(a, b).unwrap();
        let abc = h.add(ab, c).unwrap();
        let abcc = h.add(abc, c2).unwrap();
        let root = h.sum(abcc);
        h.backward(root).unwrap();
        for i in 0..2 {
            let split = h.grad(x1)[i] + h.grad(x2)[i] + h.grad(x3)[i] + h.grad(x4)[i];
            assert!((split - shared[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_add_counts_twice() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1], vec![2.0]);
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![2.0]);
    }

    #[test]
    fn topology_inputs_precede_consumers() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1, 2], vec![1.0, -1.0]);
        let w = var(&mut g, &[2, 2], vec![0.5, 0.1, -0.2, 0.3]);
        let h = g.matmul(x, w).unwrap();
        let e = g.elu(h);
        let c = g.concat(&[e, x]).unwrap();
        let s = g.slice(c, 1, 3).unwrap();
        let root = g.mean(s);
        for id in 0..g.len() {
            let v = Var(id);
            assert!(g.inputs_of(v).iter().all(|i| i.0 < id));
        }
        g.backward(root).unwrap();
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1], vec![2.0]);
        let d = g.detach(x);
        let y = g.square(d);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![0.0]);
    }

    #[test]
    fn select_cols_picks_entries() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.select_cols(x, &[2, 0]).unwrap();
        assert_eq!(g.value(s), &[3.0, 4.0]);
    }
}
