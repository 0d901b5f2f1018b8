//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every op evaluates eagerly and pushes
//! a node that refers only to earlier nodes, so node order is a topological
//! order and backward is a single reverse sweep. Graphs are rebuilt for every
//! training step.
//!
//! ```
//! use latflow_core::autodiff::Graph;
//! use latflow_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let loss = x.square();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, invert, Tensor};

/// Probabilities below this are floored before taking logs in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Exp(usize),
    Sigmoid(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SumRows(usize),
    ExpandRows(usize),
    Concat(Vec<usize>),
    GatherCols(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Clamp(usize, f64, f64),
    NormL2(usize),
    NormL1(usize),
    CrossEntropy(usize, Vec<usize>),
    Inverse(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

pub struct Graph {
    inner: RefCell<Inner>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// How an operand of an elementwise op maps onto the output.
#[derive(Clone, Copy, PartialEq, Debug)]
enum Bc {
    Full,
    Row,
    Scalar,
}

impl Bc {
    #[inline]
    fn at(self, i: usize, cols: usize) -> usize {
        match self {
            Bc::Full => i,
            Bc::Row => i % cols,
            Bc::Scalar => 0,
        }
    }
}

fn broadcast(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<([usize; 2], Bc, Bc)> {
    let err = || Error::Shape { op, lhs: a, rhs: b };
    if a == b {
        return Ok((a, Bc::Full, Bc::Full));
    }
    if a == [1, 1] {
        return Ok((b, Bc::Scalar, Bc::Full));
    }
    if b == [1, 1] {
        return Ok((a, Bc::Full, Bc::Scalar));
    }
    if a[0] == 1 && a[1] == b[1] {
        return Ok((b, Bc::Row, Bc::Full));
    }
    if b[0] == 1 && a[1] == b[1] {
        return Ok((a, Bc::Full, Bc::Row));
    }
    Err(err())
}

fn bc_of(operand: [usize; 2], out: [usize; 2]) -> Bc {
    if operand == out {
        Bc::Full
    } else if operand == [1, 1] {
        Bc::Scalar
    } else {
        Bc::Row
    }
}

/// Folds a full-shape gradient back onto a (possibly broadcast) operand.
fn reduce_to(bc: Bc, shape: [usize; 2], g: Tensor) -> Tensor {
    match bc {
        Bc::Full => g,
        Bc::Scalar => Tensor::scalar(g.sum()),
        Bc::Row => {
            let mut out = Tensor::zeros(1, shape[1]);
            let cols = shape[1];
            let o = out.data_mut();
            for (i, v) in g.data().iter().enumerate() {
                o[i % cols] += v;
            }
            out
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            grad_enabled: true,
        }
    }

    /// A graph that records no derivative information; `backward` on it is a
    /// no-op. Used for sampling and evaluation over frozen parameters.
    pub fn no_grad() -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Constant };
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf that is not backed by a stored parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.inner.borrow_mut().params.insert(id, v.id);
        v
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.with(v.id, Tensor::clone)
    }

    /// Accumulated gradient of a leaf; zeros when none has been computed.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        node.grad.clone().unwrap_or_else(|| {
            let [r, c] = node.value.shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grad(&self) {
        for n in &mut self.inner.borrow_mut().nodes {
            n.grad = None;
        }
    }

    /// Gradients of every stored parameter used in this graph.
    pub fn gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::new(store);
        let inner = self.inner.borrow();
        for (&pid, &node) in &inner.params {
            if let Some(g) = &inner.nodes[node].grad {
                out.accumulate(pid, g);
            }
        }
        out
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let inner = self.inner.borrow();
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.id].value).collect();
        let value = Tensor::hcat(&tensors)?;
        let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
        drop(inner);
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let shape = loss.shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.grad_enabled {
            return Ok(());
        }
        let mut inner = self.inner.borrow_mut();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(Tensor::scalar(1.0));
        let mut leaf_grads = Vec::new();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            propagate(&inner.nodes, id, g, &mut grads);
        }
        for (id, g) in leaf_grads {
            match &mut inner.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_grad(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sub = matches!(nodes[id].op, Op::Sub(..));
            let (a, b) = (*a, *b);
            if need(b) {
                let mut gb = reduce_to(bc_of(val(b).shape(), out.shape()), val(b).shape(), g.clone());
                if sub {
                    gb.scale_assign(-1.0);
                }
                add_grad(nodes, grads, b, gb);
            }
            if need(a) {
                let ga = reduce_to(bc_of(val(a).shape(), out.shape()), val(a).shape(), g);
                add_grad(nodes, grads, a, ga);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let cols = out.cols();
            let (ba, bb) = (bc_of(val(a).shape(), out.shape()), bc_of(val(b).shape(), out.shape()));
            if need(a) {
                let bv = val(b).data();
                let mut ga = g.clone();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= bv[bb.at(i, cols)];
                }
                add_grad(nodes, grads, a, reduce_to(ba, val(a).shape(), ga));
            }
            if need(b) {
                let av = val(a).data();
                let mut gb = g;
                for (i, x) in gb.data_mut().iter_mut().enumerate() {
                    *x *= av[ba.at(i, cols)];
                }
                add_grad(nodes, grads, b, reduce_to(bb, val(b).shape(), gb));
            }
        }
        Op::Scale(a, k) => {
            let mut g = g;
            g.scale_assign(*k);
            add_grad(nodes, grads, *a, g);
        }
        Op::AddScalar(a) => add_grad(nodes, grads, *a, g),
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            if need(a) {
                let [r, c] = val(a).shape();
                accumulate_gemm(grads, a, r, c, &g, false, val(b), true);
            }
            if need(b) {
                let [r, c] = val(b).shape();
                accumulate_gemm(grads, b, r, c, val(a), true, &g, false);
            }
        }
        Op::Transpose(a) => add_grad(nodes, grads, *a, g.transpose()),
        Op::Tanh(a) => {
            let mut g = g;
            for (x, y) in g.data_mut().iter_mut().zip(out.data()) {
                *x *= 1.0 - y * y;
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::Exp(a) => {
            let mut g = g;
            for (x, y) in g.data_mut().iter_mut().zip(out.data()) {
                *x *= y;
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::Sigmoid(a) => {
            let mut g = g;
            for (x, y) in g.data_mut().iter_mut().zip(out.data()) {
                *x *= y * (1.0 - y);
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::Square(a) => {
            let mut g = g;
            for (x, v) in g.data_mut().iter_mut().zip(val(*a).data()) {
                *x *= 2.0 * v;
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::Abs(a) => {
            let mut g = g;
            for (x, v) in g.data_mut().iter_mut().zip(val(*a).data()) {
                *x *= sign(*v);
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::Sum(a) | Op::Mean(a) => {
            let [r, c] = val(*a).shape();
            let k = if matches!(nodes[id].op, Op::Mean(_)) {
                g.item() / (r * c) as f64
            } else {
                g.item()
            };
            add_grad(nodes, grads, *a, Tensor::filled(r, c, k));
        }
        Op::SumCols(a) => {
            let [r, c] = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let gi = g.data()[i];
                ga.row_slice_mut(i).fill(gi);
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::SumRows(a) => {
            let [r, c] = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                ga.row_slice_mut(i).copy_from_slice(g.data());
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::ExpandRows(a) => {
            let cols = g.cols();
            add_grad(nodes, grads, *a, reduce_to(Bc::Row, [1, cols], g));
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                if need(p) {
                    add_grad(nodes, grads, p, g.slice_cols(start, start + w));
                }
                start += w;
            }
        }
        Op::GatherCols(a, idx) => {
            let [r, c] = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let src = g.row_slice(i);
                let dst = ga.row_slice_mut(i);
                for (k, &j) in idx.iter().enumerate() {
                    dst[j] += src[k];
                }
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let [r, c] = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                    *d += s;
                }
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let mut g = g;
            for (x, v) in g.data_mut().iter_mut().zip(val(*a).data()) {
                if *v < *lo || *v > *hi {
                    *x = 0.0;
                }
            }
            add_grad(nodes, grads, *a, g);
        }
        Op::NormL2(a) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for i in 0..av.rows() {
                let n = out.data()[i];
                if n > 0.0 {
                    let k = g.data()[i] / n;
                    for (d, v) in ga.row_slice_mut(i).iter_mut().zip(av.row_slice(i)) {
                        *d = k * v;
                    }
                }
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::NormL1(a) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for i in 0..av.rows() {
                let k = g.data()[i];
                for (d, v) in ga.row_slice_mut(i).iter_mut().zip(av.row_slice(i)) {
                    *d = k * sign(*v);
                }
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::CrossEntropy(a, targets) => {
            let logits = val(*a);
            let mut ga = Tensor::zeros(logits.rows(), logits.cols());
            for (i, &t) in targets.iter().enumerate() {
                let row = logits.row_slice(i);
                let probs = softmax(row);
                if probs[t] <= PROB_FLOOR {
                    continue;
                }
                let k = g.data()[i];
                let dst = ga.row_slice_mut(i);
                for (j, p) in probs.iter().enumerate() {
                    dst[j] = k * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            add_grad(nodes, grads, *a, ga);
        }
        Op::Inverse(a) => {
            // d(A^-1) = -A^-1 dA A^-1  =>  grad_A = -Y^T G Y^T
            let yt = out.transpose();
            let mut ga = yt.matmul(&g).and_then(|t| t.matmul(&yt)).expect("square");
            ga.scale_assign(-1.0);
            add_grad(nodes, grads, *a, ga);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_gemm(
    grads: &mut [Option<Tensor>],
    target: usize,
    rows: usize,
    cols: usize,
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
) {
    match &mut grads[target] {
        Some(acc) => gemm(a, ta, b, tb, acc, 1.0),
        slot @ None => {
            let mut t = Tensor::zeros(rows, cols);
            gemm(a, ta, b, tb, &mut t, 0.0);
            *slot = Some(t);
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    /// Value of a `[1, 1]` node.
    pub fn item(&self) -> f64 {
        self.graph.with(self.id, Tensor::item)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.with(self.id, Tensor::shape)
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn all_finite(&self) -> bool {
        self.graph.with(self.id, Tensor::all_finite)
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.graph.with(self.id, |t| t.map(&f));
        self.graph.push(value, op(self.id), self.graph.needs(self.id))
    }

    fn binary(
        self,
        rhs: Var<'g>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let inner = self.graph.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[rhs.id].value);
        let (shape, ba, bb) = broadcast(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let cols = shape[1];
        let data = (0..shape[0] * cols)
            .map(|i| f(ad[ba.at(i, cols)], bd[bb.at(i, cols)]))
            .collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        let value = Tensor::from_vec(shape[0], shape[1], data)?;
        Ok(self.graph.push(value, op(self.id, rhs.id), needs))
    }

    /// Elementwise sum; either side may be a `[1, c]` row or a `[1, 1]`
    /// scalar broadcast over the batch.
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(|a| Op::Scale(a, k), move |v| v * k)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.unary(Op::AddScalar, move |v| v + k)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let inner = self.graph.inner.borrow();
        let value = inner.nodes[self.id].value.matmul(&inner.nodes[rhs.id].value)?;
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        Ok(self.graph.push(value, Op::MatMul(self.id, rhs.id), needs))
    }

    pub fn transpose(self) -> Var<'g> {
        let value = self.graph.with(self.id, Tensor::transpose);
        self.graph.push(value, Op::Transpose(self.id), self.graph.needs(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square, |v| v * v)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(move |a| Op::Clamp(a, lo, hi), move |v| v.clamp(lo, hi))
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(self) -> Var<'g> {
        let value = Tensor::scalar(self.graph.with(self.id, Tensor::sum));
        self.graph.push(value, Op::Sum(self.id), self.graph.needs(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let value = Tensor::scalar(self.graph.with(self.id, Tensor::mean));
        self.graph.push(value, Op::Mean(self.id), self.graph.needs(self.id))
    }

    /// Per-row sum across columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(self) -> Var<'g> {
        let value = self.graph.with(self.id, |t| {
            let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
            Tensor::from_vec(t.rows(), 1, data).expect("shape")
        });
        self.graph.push(value, Op::SumCols(self.id), self.graph.needs(self.id))
    }

    /// Per-row mean across columns: `[r, c] -> [r, 1]`.
    pub fn mean_cols(self) -> Var<'g> {
        let c = self.cols() as f64;
        self.sum_cols().scale(1.0 / c)
    }

    /// Per-column sum across rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(self) -> Var<'g> {
        let value = self.graph.with(self.id, |t| {
            let mut out = Tensor::zeros(1, t.cols());
            for r in 0..t.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            out
        });
        self.graph.push(value, Op::SumRows(self.id), self.graph.needs(self.id))
    }

    /// Repeats a `[1, c]` row `rows` times.
    pub fn expand_rows(self, rows: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape[0] != 1 {
            return Err(Error::Shape {
                op: "expand_rows",
                lhs: shape,
                rhs: [rows, shape[1]],
            });
        }
        let value = self.graph.with(self.id, |t| t.repeat_rows(rows));
        Ok(self.graph.push(value, Op::ExpandRows(self.id), self.graph.needs(self.id)))
    }

    pub fn gather_cols(self, idx: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if let Some(&bad) = idx.iter().find(|&&j| j >= shape[1]) {
            return Err(Error::Dim(format!("column {bad} out of range for {shape:?}")));
        }
        let value = self.graph.with(self.id, |t| {
            let mut data = Vec::with_capacity(t.rows() * idx.len());
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                data.extend(idx.iter().map(|&j| row[j]));
            }
            Tensor::from_vec(t.rows(), idx.len(), data).expect("shape")
        });
        Ok(self
            .graph
            .push(value, Op::GatherCols(self.id, idx.to_vec()), self.graph.needs(self.id)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols(&idx)
    }

    /// Row lookup; also serves as an embedding-table gather.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Dim(format!("row {bad} out of range for {shape:?}")));
        }
        let value = self.graph.with(self.id, |t| t.select_rows(idx));
        Ok(self
            .graph
            .push(value, Op::GatherRows(self.id, idx.to_vec()), self.graph.needs(self.id)))
    }

    /// Euclidean norm of every row, `[r, 1]`. The gradient at a zero row is
    /// taken as zero.
    pub fn norm_l2_rows(self) -> Var<'g> {
        let value = self.graph.with(self.id, |t| {
            let data = (0..t.rows())
                .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::from_vec(t.rows(), 1, data).expect("shape")
        });
        self.graph.push(value, Op::NormL2(self.id), self.graph.needs(self.id))
    }

    pub fn norm_l1_rows(self) -> Var<'g> {
        let value = self.graph.with(self.id, |t| {
            let data = (0..t.rows())
                .map(|r| t.row_slice(r).iter().map(|v| v.abs()).sum::<f64>())
                .collect();
            Tensor::from_vec(t.rows(), 1, data).expect("shape")
        });
        self.graph.push(value, Op::NormL1(self.id), self.graph.needs(self.id))
    }

    /// Per-row negative log softmax probability of `targets[r]`, `[r, 1]`.
    /// Probabilities are floored at [`PROB_FLOOR`].
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g>> {
        let [rows, cols] = self.shape();
        if targets.len() != rows {
            return Err(Error::Dim(format!(
                "{} targets for {rows} rows of logits",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: cols });
        }
        let value = self.graph.with(self.id, |t| {
            let data = targets
                .iter()
                .enumerate()
                .map(|(r, &k)| -softmax(t.row_slice(r))[k].max(PROB_FLOOR).ln())
                .collect();
            Tensor::from_vec(rows, 1, data).expect("shape")
        });
        Ok(self.graph.push(
            value,
            Op::CrossEntropy(self.id, targets.to_vec()),
            self.graph.needs(self.id),
        ))
    }

    /// Inverse of a square matrix node.
    pub fn inverse(self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape[0] != shape[1] {
            return Err(Error::Shape {
                op: "inverse",
                lhs: shape,
                rhs: [shape[1], shape[0]],
            });
        }
        let value = self
            .graph
            .with(self.id, invert)
            .ok_or_else(|| Error::Dim("singular matrix".into()))?;
        Ok(self.graph.push(value, Op::Inverse(self.id), self.graph.needs(self.id)))
    }
}
