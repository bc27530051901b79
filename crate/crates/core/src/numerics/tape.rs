//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a `1 x 1` output consumes the tape and returns the
//! gradient of that output with respect to every recorded variable.
//!
//! Binary elementwise ops broadcast: an operand may be `1 x 1`, `1 x cols`
//! or `rows x 1` against a `rows x cols` partner.

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Logistic,
    Relu,
    Exp,
    Log,
    Softplus,
    Abs,
    Square,
    SumAll,
    SumRows,
    SumCols,
    Concat,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise op with stored local derivative (same shape as the output).
    Unary(Var, Tensor),
    /// Caller-supplied local derivatives, each at output shape; inputs may broadcast.
    Custom(Vec<(Var, Tensor)>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            left: a,
            right: b,
        }),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    t.get(rr, cc)
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.rows(), a.cols(), data);
    }
    let (r, c) = broadcast_shape(op, a.shape(), b.shape())?;
    Ok(Tensor::from_fn(r, c, |i, j| f(bidx(a, i, j), bidx(b, i, j))))
}

/// Sums a gradient at output shape down to a (possibly broadcast) input shape.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Uniform entry point over the op set.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::Concat => usize::MAX,
            _ => 1,
        };
        if arity != usize::MAX && inputs.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::Neg => self.neg(inputs[0]),
            OpKind::Logistic => self.logistic(inputs[0]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Exp => self.exp(inputs[0]),
            OpKind::Log => self.ln(inputs[0]),
            OpKind::Softplus => self.softplus(inputs[0]),
            OpKind::Abs => self.abs(inputs[0]),
            OpKind::Square => self.square(inputs[0]),
            OpKind::SumAll => self.sum(inputs[0]),
            OpKind::SumRows => self.sum_rows(inputs[0]),
            OpKind::SumCols => self.sum_cols(inputs[0]),
            OpKind::Concat => self.concat_cols(inputs),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add", v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("div", v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push("scale", v, Op::Scale(a, factor), ng)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let d = Tensor::filled(v.rows(), v.cols(), 1.0);
        self.unary("add_scalar", a, v, d)
    }

    fn unary(&mut self, name: &'static str, a: Var, value: Tensor, deriv: Tensor) -> Result<Var> {
        let ng = self.needs(a);
        let op = if ng { Op::Unary(a, deriv) } else { Op::Leaf };
        self.push(name, value, op, ng)
    }

    fn map_unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut vals = Vec::with_capacity(x.len());
        let mut ders = Vec::with_capacity(x.len());
        for &xi in x.data() {
            let (y, d) = f(xi);
            vals.push(y);
            ders.push(d);
        }
        let value = Tensor::new(rows, cols, vals)?;
        let deriv = Tensor::new(rows, cols, ders)?;
        self.unary(name, a, value, deriv)
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var> {
        self.map_unary("logistic", a, |x| {
            let s = logistic(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary("exp", a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map_unary("log", a, |x| (x.ln(), 1.0 / x))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map_unary("softplus", a, |x| (softplus(x), logistic(x)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map_unary("abs", a, |x| {
            let s = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x.abs(), s)
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_unary("square", a, |x| (x * x, 2.0 * x))
    }

    /// Clamps to `[lo, hi]`; the derivative is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map_unary("clamp", a, move |x| {
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        })
    }

    /// Records a value computed outside the tape together with its local
    /// derivatives. Each derivative has the output's shape; a parent may be
    /// broadcast against the output, in which case its gradient is summed.
    pub fn custom(&mut self, name: &'static str, value: Tensor, parents: Vec<(Var, Tensor)>) -> Result<Var> {
        for (p, d) in &parents {
            if d.shape() != value.shape() {
                return Err(Error::Dimension {
                    op: name,
                    left: value.shape(),
                    right: d.shape(),
                });
            }
            broadcast_shape(name, self.shape(*p), value.shape())?;
        }
        let parents: Vec<_> = parents.into_iter().filter(|(p, _)| self.needs(*p)).collect();
        let ng = !parents.is_empty();
        self.push(name, value, Op::Custom(parents), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", v, Op::MatMul(a, b), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat", v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start > end || end > cols {
            return Err(Error::contract(format!(
                "column slice {start}..{end} out of range for {cols} columns"
            )));
        }
        let v = self.value(a).slice_cols(start, end);
        let ng = self.needs(a);
        self.push("slice_cols", v, Op::SliceCols(a, start), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("row {bad} out of range for {rows} rows")));
        }
        let v = self.value(a).select_rows(idx);
        let ng = self.needs(a);
        self.push("select_rows", v, Op::SelectRows(a, idx.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push("sum", v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `rows x cols -> 1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let ng = self.needs(a);
        self.push("sum_rows", out, Op::SumRows(a), ng)
    }

    /// Row sums: `rows x cols -> rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_fn(x.rows(), 1, |r, _| x.row(r).iter().sum());
        let ng = self.needs(a);
        self.push("sum_cols", out, Op::SumCols(a), ng)
    }

    /// Per-column mean over rows: `rows x cols -> 1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar output; consumes the tape.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {out_shape:?}"
            )));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let nodes = self.nodes;
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), shapes[a.0]));
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], reduce_to(g.clone(), shapes[b.0]));
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), shapes[a.0]));
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], reduce_to(g.map(|x| -x), shapes[b.0]));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let ga = zip_broadcast("mul", &g, val(*b), |x, y| x * y)?;
                        accumulate(&mut grads[a.0], reduce_to(ga, shapes[a.0]));
                    }
                    if needs(*b) {
                        let gb = zip_broadcast("mul", &g, val(*a), |x, y| x * y)?;
                        accumulate(&mut grads[b.0], reduce_to(gb, shapes[b.0]));
                    }
                }
                Op::Div(a, b) => {
                    if needs(*a) {
                        let ga = zip_broadcast("div", &g, val(*b), |x, y| x / y)?;
                        accumulate(&mut grads[a.0], reduce_to(ga, shapes[a.0]));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -out/b
                        let t = zip_broadcast("div", &node.value, val(*b), |o, y| -o / y)?;
                        let gb = zip_broadcast("div", &g, &t, |x, y| x * y)?;
                        accumulate(&mut grads[b.0], reduce_to(gb, shapes[b.0]));
                    }
                }
                Op::Unary(a, d) => {
                    let ga = zip_broadcast("unary", &g, d, |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Custom(parents) => {
                    for (p, d) in parents {
                        let gp = zip_broadcast("custom", &g, d, |x, y| x * y)?;
                        accumulate(&mut grads[p.0], reduce_to(gp, shapes[p.0]));
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads[a.0], g.map(|x| x * f));
                }
                Op::MatMul(a, b) => {
                    let (n, k) = shapes[a.0];
                    let m = shapes[b.0].1;
                    if needs(*a) {
                        let mut ga = Tensor::zeros(n, k);
                        matmul_bt_into(g.data(), val(*b).data(), ga.data_mut(), n, m, k);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if needs(*b) {
                        let mut gb = Tensor::zeros(k, m);
                        matmul_at_into(val(*a).data(), g.data(), gb.data_mut(), n, k, m);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = shapes[p.0].1;
                        if needs(*p) {
                            accumulate(&mut grads[p.0], g.slice_cols(start, start + w));
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = shapes[a.0];
                    let w = g.cols();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + w].copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = shapes[a.0];
                    let mut ga = Tensor::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = shapes[a.0];
                    accumulate(&mut grads[a.0], Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, _) = shapes[a.0];
                    accumulate(&mut grads[a.0], g.repeat_rows(r));
                }
                Op::SumCols(a) => {
                    let (r, c) = shapes[a.0];
                    accumulate(&mut grads[a.0], Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}
