//! Define-by-run computation record.
//!
//! Every operation appends a node holding its forward value. Because nodes
//! can only reference earlier nodes, the record is topologically sorted by
//! construction and the backward sweep simply walks it in reverse.

use super::gemm::gemm;
use super::optim::{ParamId, ParamSet};
use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds that can be dispatched generically through [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    Abs,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    PairwiseSqDist,
    BceWithLogits,
}

impl OpKind {
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::PairwiseSqDist
            | OpKind::BceWithLogits => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Constant,
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var, broadcast: bool },
    Mul(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, end: usize },
    PairwiseSqDist(Var, Var),
    BceWithLogits { logits: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`] for every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> DiffError {
    DiffError::Shape(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pow_value(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

impl Tape {
    /// Tape whose parameter leaves take part in differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// Tape that records parameters as constants (evaluation mode).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable input that is not an optimizer parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), true)
    }

    /// Records a parameter's current value. On an inference tape it is a constant.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.get(id).tensor.clone();
        if self.track_params {
            self.push(value, Op::Leaf(Some(id)), true)
        } else {
            self.push(value, Op::Constant, false)
        }
    }

    /// Generic dispatch over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, DiffError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(DiffError::Arity {
                    expected: n,
                    got: inputs.len(),
                });
            }
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Log => Ok(self.log(inputs[0])),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Abs => Ok(self.abs(inputs[0])),
            OpKind::Pow(p) => Ok(self.pow(inputs[0], p)),
            OpKind::Scale(c) => Ok(self.scale(inputs[0], c)),
            OpKind::AddScalar(c) => Ok(self.add_scalar(inputs[0], c)),
            OpKind::Clamp(lo, hi) => Ok(self.clamp(inputs[0], lo, hi)),
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => self.slice(inputs[0], axis, start, end),
            OpKind::PairwiseSqDist => self.pairwise_sq_dist(inputs[0], inputs[1]),
            OpKind::BceWithLogits => self.bce_with_logits(inputs[0], inputs[1]),
        }
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Whether `b` broadcasts over the leading axis of `a`.
    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<bool, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let row = &sa[1..];
        let trailing_match = sa.len() >= 2
            && (sb == row || (sb.len() == sa.len() && sb[0] == 1 && &sb[1..] == row));
        if trailing_match {
            Ok(true)
        } else {
            Err(shape_err(format!("{what} {sa:?} with {sb:?}")))
        }
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), DiffError> {
        let broadcast = self.broadcast_kind(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if broadcast {
            let width = tb.numel();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % width]))
                .collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok((Tensor::new(ta.shape(), data)?, broadcast))
    }

    /// Elementwise sum; `b` may broadcast over the leading (batch) axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, broadcast) = self.binary_elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, broadcast) = self.binary_elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b, broadcast }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "mul {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (value, _) = self.binary_elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match u {
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Abs => Box::new(f64::abs),
            Unary::Pow(p) => Box::new(move |v| pow_value(v, p)),
            Unary::Scale(c) => Box::new(move |v| c * v),
            Unary::AddScalar(c) => Box::new(move |v| v + c),
            Unary::Clamp(lo, hi) => Box::new(move |v: f64| v.clamp(lo, hi)),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(x, u), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Pow(p))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        if inputs.is_empty() || axis > 1 {
            return Err(shape_err(format!("concat of {} inputs on axis {axis}", inputs.len())));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(shape_err(format!("concat expects 2-D inputs, got {shapes:?}")));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(shape_err(format!("concat axis {axis} of {shapes:?}")));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (rows, cols) = if axis == 0 {
            (total, shapes[0][1])
        } else {
            (shapes[0][0], total)
        };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
        } else {
            for r in 0..rows {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `[start, end)` of a 2-D tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 || start >= end || end > s[axis] {
            return Err(shape_err(format!("slice [{start},{end}) on axis {axis} of {s:?}")));
        }
        let t = self.value(x);
        let (data, shape) = if axis == 0 {
            (t.data()[start * s[1]..end * s[1]].to_vec(), [end - start, s[1]])
        } else {
            let mut d = Vec::with_capacity(s[0] * (end - start));
            for r in 0..s[0] {
                d.extend_from_slice(&t.row(r)[start..end]);
            }
            (d, [s[0], end - start])
        };
        let rg = self.rg(x);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                input: x,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    /// `D[i][j] = ‖xᵢ − yⱼ‖²` for row sets `x` (n×d) and `y` (m×d).
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(shape_err(format!("pairwise distance {sx:?} vs {sy:?}")));
        }
        let (n, m) = (sx[0], sy[0]);
        let (tx, ty) = (self.value(x), self.value(y));
        let mut out = Vec::with_capacity(n * m);
        for xi in tx.row_iter() {
            for yj in ty.row_iter() {
                out.push(xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let rg = self.rg(x) || self.rg(y);
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(value, Op::PairwiseSqDist(x, y), rg))
    }

    /// Elementwise Bernoulli cross-entropy `−[t·log σ(s) + (1−t)·log(1−σ(s))]`
    /// evaluated stably from logits `s`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var, DiffError> {
        if self.shape(logits) != self.shape(target) {
            return Err(shape_err(format!(
                "bce logits {:?} vs target {:?}",
                self.shape(logits),
                self.shape(target)
            )));
        }
        let (value, _) = self.binary_elementwise(logits, target, "bce", |s, t| {
            s.max(0.0) - s * t + (-s.abs()).exp().ln_1p()
        })?;
        let rg = self.rg(logits) || self.rg(target);
        Ok(self.push(value, Op::BceWithLogits { logits, target }, rg))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Parameter leaves accumulate into `params` (created as zeros when the
    /// parameter was recorded but received no gradient); other leaves are
    /// reported through the returned [`Gradients`].
    pub fn backward(&self, root: Var, params: &mut ParamSet) -> Result<Gradients, DiffError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(DiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if let Op::Leaf(_) = node.op {
                    grads[idx] = Some(vec![0.0; node.value.numel()]);
                }
                continue;
            };
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(pid)) = node.op {
                let g = grads[idx]
                    .as_deref()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                params.accumulate_grad(pid, &g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut da, false);
                    acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                    acc(grads, *b, db);
                }
            }
            Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    let db = if *broadcast {
                        let width = self.value(*b).numel();
                        let mut db = vec![0.0; width];
                        for chunk in g.chunks(width) {
                            db.iter_mut().zip(chunk).for_each(|(d, x)| *d += sign * x);
                        }
                        db
                    } else {
                        g.iter().map(|x| sign * x).collect()
                    };
                    acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(grads, *a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Unary(x, u) => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let local = |i: usize| -> f64 {
                    let (xv, yv) = (xs[i], ys[i]);
                    match *u {
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Exp => yv,
                        Unary::Log => 1.0 / xv,
                        Unary::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Pow(p) => {
                            if p == 0.0 {
                                0.0
                            } else {
                                p * pow_value(xv, p - 1.0)
                            }
                        }
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => 1.0,
                        Unary::Clamp(lo, hi) => {
                            if (lo..=hi).contains(&xv) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                };
                acc(grads, *x, g.iter().enumerate().map(|(i, gi)| gi * local(i)).collect());
            }
            Op::Sum(x) => {
                acc(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { inputs, axis } => {
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape();
                    let (r, c) = (s[0], s[1]);
                    if self.rg(v) {
                        let part = if *axis == 0 {
                            g[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            (0..r)
                                .flat_map(|i| g[i * cols + offset..i * cols + offset + c].iter().copied())
                                .collect()
                        };
                        acc(grads, v, part);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let s = self.value(*input).shape();
                let mut d = vec![0.0; s[0] * s[1]];
                if *axis == 0 {
                    d[start * s[1]..end * s[1]].copy_from_slice(g);
                } else {
                    let w = end - start;
                    for r in 0..s[0] {
                        d[r * s[1] + start..r * s[1] + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                }
                acc(grads, *input, d);
            }
            Op::PairwiseSqDist(x, y) => {
                let (tx, ty) = (self.value(*x), self.value(*y));
                let (n, m, d) = (tx.rows(), ty.rows(), tx.cols());
                let mut dx = vec![0.0; n * d];
                let mut dy = vec![0.0; m * d];
                for i in 0..n {
                    let xi = tx.row(i);
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = ty.row(j);
                        for k in 0..d {
                            let diff = gij * (xi[k] - yj[k]);
                            dx[i * d + k] += diff;
                            dy[j * d + k] -= diff;
                        }
                    }
                }
                if self.rg(*x) {
                    acc(grads, *x, dx);
                }
                if self.rg(*y) {
                    acc(grads, *y, dy);
                }
            }
            Op::BceWithLogits { logits, target } => {
                let (ts, tt) = (self.value(*logits), self.value(*target));
                if self.rg(*logits) {
                    let d = g
                        .iter()
                        .zip(ts.data().iter().zip(tt.data()))
                        .map(|(g, (&s, &t))| g * (sigmoid(s) - t))
                        .collect();
                    acc(grads, *logits, d);
                }
                if self.rg(*target) {
                    let d = g.iter().zip(ts.data()).map(|(g, &s)| -g * s).collect();
                    acc(grads, *target, d);
                }
            }
        }
    }
}
