//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is a valid topological order. [`Graph::backward`] walks the
//! tape once in reverse and returns the accumulated [`Gradients`]; the tape
//! is then consumed and a second backward pass is an error.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::special;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, gemm, unbroadcast, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
    Neg,
    Sqrt,
    Lgamma,
    Digamma,
    PowScalar(f64),
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    MatMul(usize, usize),
    Reduce { op: ReduceOp, input: usize, axis: usize },
    SumAll(usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Pick { input: usize, index: Vec<usize> },
    Cholesky(usize),
    SolveLower { l: usize, b: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::SumAll(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Cholesky(a)
            | Op::Reduce { input: a, .. }
            | Op::Pick { input: a, .. } => vec![*a],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::SolveLower { l, b } => vec![*l, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf holding a copy of `value`.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = vars.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {shape0:?}")));
        }
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let mut out_shape = shape0.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat of {shape0:?} and {s:?} along {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat { inputs: ids, axis }))
    }

    /// Runs reverse mode from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in input_grads(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at node {id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(op: UnaryOp, x: &Tensor) -> Result<Tensor> {
    let check = |ok: fn(f64) -> bool, what: &str| -> Result<()> {
        match x.data().iter().find(|&&v| !ok(v)) {
            Some(v) => Err(Error::Domain(format!("{what} of {v}"))),
            None => Ok(()),
        }
    };
    Ok(match op {
        UnaryOp::Exp => x.map(f64::exp),
        UnaryOp::Log => {
            check(|v| v > 0.0, "log")?;
            x.map(f64::ln)
        }
        UnaryOp::Tanh => x.map(f64::tanh),
        UnaryOp::Relu => x.map(|v| v.max(0.0)),
        UnaryOp::Softplus => x.map(softplus),
        UnaryOp::Sigmoid => x.map(sigmoid),
        UnaryOp::Neg => x.map(|v| -v),
        UnaryOp::Sqrt => {
            check(|v| v >= 0.0, "sqrt")?;
            x.map(f64::sqrt)
        }
        UnaryOp::Lgamma => {
            check(|v| v > 0.0, "lgamma")?;
            x.map(special::lgamma)
        }
        UnaryOp::Digamma => {
            check(|v| v > 0.0, "digamma")?;
            x.map(special::digamma)
        }
        UnaryOp::PowScalar(p) => x.map(|v| v.powf(p)),
        UnaryOp::Scale(c) => x.map(|v| v * c),
        UnaryOp::AddScalar(c) => x.map(|v| v + c),
        UnaryOp::ClampMin(c) => x.map(|v| v.max(c)),
        UnaryOp::ClampMax(c) => x.map(|v| v.min(c)),
    })
}

fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Tanh => 1.0 - y * y,
        UnaryOp::Relu => f64::from(x > 0.0),
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Neg => -1.0,
        // subgradient 0 at the origin
        UnaryOp::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryOp::Lgamma => special::digamma(x),
        UnaryOp::Digamma => special::trigamma(x),
        UnaryOp::PowScalar(p) => {
            if p == 0.0 {
                0.0
            } else {
                p * x.powf(p - 1.0)
            }
        }
        UnaryOp::Scale(c) => c,
        UnaryOp::AddScalar(_) => 1.0,
        UnaryOp::ClampMin(c) => f64::from(x > c),
        UnaryOp::ClampMax(c) => f64::from(x < c),
    }
}

fn binary_forward(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match op {
        BinaryOp::Div => {
            if b.data().iter().any(|&v| v == 0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        BinaryOp::Pow => {
            if let Some(v) = a.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Domain(format!("pow with non-positive base {v}")));
            }
        }
        _ => {}
    }
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
        BinaryOp::Pow => x.powf(y),
    };
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut out = vec![0.0; shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
    Tensor::new(shape, out)
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn reduce_forward(op: ReduceOp, x: &Tensor, axis: usize) -> (Vec<f64>, Option<Vec<usize>>) {
    let (outer, len, inner) = around(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    let mut argmax = (op == ReduceOp::Max).then(|| vec![0usize; outer * inner]);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| d[(o * len + j) * inner + i];
            let r = o * inner + i;
            out[r] = match op {
                ReduceOp::Sum => (0..len).map(at).sum(),
                ReduceOp::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                ReduceOp::Max => {
                    let mut best = 0;
                    for j in 1..len {
                        if at(j) > at(best) {
                            best = j;
                        }
                    }
                    if let Some(am) = argmax.as_mut() {
                        am[r] = best;
                    }
                    at(best)
                }
                ReduceOp::LogSumExp => {
                    let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                    if m == f64::NEG_INFINITY || m == f64::INFINITY {
                        m
                    } else {
                        m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                    }
                }
            };
        }
    }
    (out, argmax)
}

/// Computes the gradient contribution of `node` to each of its inputs.
fn input_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let y = &node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Unary(op, a) => {
            let x = val(*a);
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * unary_derivative(*op, xi, yi))
                .collect();
            vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Binary(op, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let shape = y.shape();
            let sa = broadcast_strides(ta.shape(), shape);
            let sb = broadcast_strides(tb.shape(), shape);
            let n = y.len();
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            let (ad, bd, yd, gd) = (ta.data(), tb.data(), y.data(), g.data());
            for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                let (x1, x2, go) = (ad[i], bd[j], gd[o]);
                let (da, db) = match op {
                    BinaryOp::Add => (1.0, 1.0),
                    BinaryOp::Sub => (1.0, -1.0),
                    BinaryOp::Mul => (x2, x1),
                    BinaryOp::Div => (1.0 / x2, -x1 / (x2 * x2)),
                    BinaryOp::Pow => (x2 * x1.powf(x2 - 1.0), yd[o] * x1.ln()),
                };
                ga[o] = go * da;
                gb[o] = go * db;
            });
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, unbroadcast(&Tensor::new(shape.to_vec(), ga)?, ta.shape())));
            }
            if needs(*b) {
                out.push((*b, unbroadcast(&Tensor::new(shape.to_vec(), gb)?, tb.shape())));
            }
            out
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2()?;
            let (_, n) = tb.dims2()?;
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                out.push((*a, Tensor::new(vec![m, k], ga)?));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                out.push((*b, Tensor::new(vec![k, n], gb)?));
            }
            out
        }
        Op::Reduce { op, input, axis } => {
            let x = val(*input);
            let (outer, len, inner) = around(x.shape(), *axis);
            let (xd, yd, gd) = (x.data(), y.data(), g.data());
            let argmax = if *op == ReduceOp::Max { reduce_forward(*op, x, *axis).1 } else { None };
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for j in 0..len {
                        let p = (o * len + j) * inner + i;
                        gx[p] = gd[r]
                            * match op {
                                ReduceOp::Sum => 1.0,
                                ReduceOp::Mean => 1.0 / len as f64,
                                ReduceOp::LogSumExp => (xd[p] - yd[r]).exp(),
                                ReduceOp::Max => f64::from(argmax.as_ref().is_some_and(|am| am[r] == j)),
                            };
                    }
                }
            }
            vec![(*input, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = around(y.shape(), *axis);
            let total = y.shape()[*axis] * inner;
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &input in inputs {
                let x = val(input);
                let chunk = x.shape()[*axis] * inner;
                if needs(input) {
                    let mut gx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        gx.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    out.push((input, Tensor::new(x.shape().to_vec(), gx)?));
                }
                offset += chunk;
            }
            out
        }
        Op::Pick { input, index } => {
            let x = val(*input);
            let c = *x.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; x.len()];
            for (r, &k) in index.iter().enumerate() {
                gx[r * c + k] = g.data()[r];
            }
            vec![(*input, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::Cholesky(a) => {
            let l = y.as_ref();
            let n = l.shape()[0];
            // P = Φ(Lᵀ tril(Ḡ)), Φ keeps the lower triangle and halves the diagonal
            let mut gl = g.clone();
            tril_in_place(&mut gl, n);
            let mut p = l.transpose()?.matmul(&gl)?;
            for i in 0..n {
                for j in 0..n {
                    let v = p.get2(i, j);
                    p.set2(
                        i,
                        j,
                        if j > i {
                            0.0
                        } else if i == j {
                            0.5 * v
                        } else {
                            v
                        },
                    );
                }
            }
            // S = L⁻ᵀ P L⁻¹, returned symmetrized
            let x = linalg::solve_lower_transpose(l, &p)?;
            let s = linalg::solve_lower_transpose(l, &x.transpose()?)?;
            let st = s.transpose()?;
            vec![(*a, s.zip_map(&st, |u, v| 0.5 * (u + v))?)]
        }
        Op::SolveLower { l, b } => {
            let tl = val(*l);
            let n = tl.shape()[0];
            let gb = linalg::solve_lower_transpose(tl, g)?;
            let mut out = Vec::with_capacity(2);
            if needs(*l) {
                let (gb2, _) = as_cols(&gb);
                let (x2, _) = as_cols(y);
                let mut gl = gb2.matmul(&x2.transpose()?)?.scale(-1.0);
                tril_in_place(&mut gl, n);
                out.push((*l, gl));
            }
            if needs(*b) {
                out.push((*b, gb));
            }
            out
        }
    })
}

fn as_cols(t: &Tensor) -> (Tensor, usize) {
    match t.shape() {
        [n] => (t.reshape(&[*n, 1]).expect("same size"), 1),
        [_, c] => (t.clone(), *c),
        _ => unreachable!("triangular solves take 1-D or 2-D right-hand sides"),
    }
}

fn tril_in_place(t: &mut Tensor, n: usize) {
    let d = t.data_mut();
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = 0.0;
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'g>> {
        let out = unary_forward(op, &self.value())?;
        Ok(self.graph.push(out, Op::Unary(op, self.id)))
    }

    pub fn binary(self, op: BinaryOp, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = binary_forward(op, &self.value(), &other.value())?;
        Ok(self.graph.push(out, Op::Binary(op, self.id, other.id)))
    }

    pub fn add(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Add, o)
    }
    pub fn sub(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Sub, o)
    }
    pub fn mul(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Mul, o)
    }
    pub fn div(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Div, o)
    }
    pub fn pow(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Pow, o)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Exp)
    }
    pub fn ln(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Log)
    }
    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Tanh)
    }
    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Relu)
    }
    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Softplus)
    }
    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Neg)
    }
    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Sqrt)
    }
    pub fn lgamma(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Lgamma)
    }
    pub fn digamma(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Digamma)
    }
    pub fn powf(self, p: f64) -> Result<Var<'g>> {
        self.unary(UnaryOp::PowScalar(p))
    }
    pub fn square(self) -> Result<Var<'g>> {
        self.powf(2.0)
    }
    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryOp::Scale(c))
    }
    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryOp::AddScalar(c))
    }
    pub fn clamp_min(self, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryOp::ClampMin(c))
    }
    pub fn clamp_max(self, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryOp::ClampMax(c))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = self.value().matmul(&other.value())?;
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id)))
    }

    /// Reduces along `axis`; the axis is dropped unless `keepdim`.
    pub fn reduce(self, op: ReduceOp, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (data, _) = reduce_forward(op, &x, axis);
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        Ok(self.graph.push(Tensor::new(shape, data)?, Op::Reduce { op, input: self.id, axis }))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Sum, axis, keepdim)
    }
    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Mean, axis, keepdim)
    }
    pub fn logsumexp(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce(ReduceOp::LogSumExp, axis, keepdim)
    }
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Max, axis, keepdim)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().sum();
        Ok(self.graph.push(Tensor::scalar(s), Op::SumAll(self.id)))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let lse = self.logsumexp(axis, true)?;
        self.sub(lse)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        self.log_softmax(axis)?.exp()
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let out = self.value().transpose()?;
        Ok(self.graph.push(out, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id)))
    }

    /// Selects `x[.., index[r]]` from each row `r` of the last axis.
    pub fn pick(self, index: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        let c = *shape.last().ok_or_else(|| Error::Shape("pick on empty shape".into()))?;
        let rows = x.len() / c.max(1);
        if index.len() != rows {
            return Err(Error::Shape(format!("pick: {} indices for {rows} rows", index.len())));
        }
        if let Some(&k) = index.iter().find(|&&k| k >= c) {
            return Err(Error::Shape(format!("pick index {k} out of range {c}")));
        }
        let data = index.iter().enumerate().map(|(r, &k)| x.data()[r * c + k]).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.graph.push(Tensor::new(out_shape, data)?, Op::Pick { input: self.id, index: index.to_vec() }))
    }

    /// Differentiable Cholesky factor of a symmetric matrix, with jitter
    /// escalation as in [`linalg::cholesky`]. Returns the factor and the
    /// jitter used.
    pub fn cholesky(self, jitter: f64) -> Result<(Var<'g>, f64)> {
        let c = linalg::cholesky(&self.value(), jitter)?;
        Ok((self.graph.push(c.factor, Op::Cholesky(self.id)), c.jitter))
    }

    /// Solves `self · X = b` where `self` is lower triangular.
    pub fn solve_lower(self, b: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&b);
        let out = linalg::solve_lower(&self.value(), &b.value())?;
        Ok(self.graph.push(out, Op::SolveLower { l: self.id, b: b.id }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let y = x.softplus().unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(x).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_gradient_matches_finite_difference() {
        let f = |x: f64| x.ln();
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let grads = g.backward(x.ln().unwrap()).unwrap();
        let h = 1e-5;
        let fd = (f(2.0 + h) - f(2.0 - h)) / (2.0 * h);
        assert!((grads.wrt(x).item() - 0.5).abs() < 1e-15);
        assert!((fd - 0.5).abs() < 1e-6);
    }

    #[test]
    fn domain_guards() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(x.ln(), Err(Error::Domain(_))));
        let one = g.scalar(1.0);
        assert!(matches!(one.div(x), Err(Error::Domain(_))));
    }

    #[test]
    fn broadcast_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.add(b), Err(Error::Broadcast { .. })));
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let g = Graph::new();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let i = g.constant(Tensor::eye(3));
        let xv = g.constant(x.clone());
        assert_eq!(*i.matmul(xv).unwrap().value(), x);
        assert!(matches!(xv.matmul(xv), Err(Error::Shape(_))));
    }

    #[test]
    fn logsumexp_values() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!((a.logsumexp(0, false).unwrap().value().item() - 2f64.ln()).abs() < 1e-15);
        let b = g.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        let v = b.logsumexp(0, false).unwrap().value().item();
        assert!(v.is_finite() && (v - 1000.0 - 2f64.ln()).abs() < 1e-12);
        let c = g.constant(Tensor::from_vec(vec![7.0, 7.0, 7.0]));
        for p in c.softmax(0).unwrap().value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(c.sum_axis(1, false), Err(Error::Shape(_))));
    }

    #[test]
    fn second_backward_is_an_error() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(1.0));
        let y = x.square().unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        // y = x*x + x  => dy/dx = 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 7.0);
    }

    #[test]
    fn pick_and_concat() {
        let g = Graph::new();
        let x = g.param(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = x.pick(&[1, 0]).unwrap();
        assert_eq!(p.value().data(), &[2.0, 3.0]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let loss = p.sum().unwrap().add(c.sum().unwrap()).unwrap();
        let grad = g.backward(loss).unwrap().wrt(x);
        assert_eq!(grad.data(), &[2.0, 3.0, 3.0, 2.0]);
    }
}
