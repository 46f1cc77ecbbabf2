//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward sweep is a single reverse pass that
//! visits each node once. Binary element-wise ops broadcast a `[1, n]` row,
//! an `[m, 1]` column, or a `[1, 1]` scalar against the other operand; nothing
//! more general is supported.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating a poisoned value.

use crate::error::{Error, Result};

use super::tensor::{gemm_nt, gemm_tn};
use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down each column, giving `[1, n]`.
    Rows,
    /// Reduce across each row (the feature axis), giving `[m, 1]`.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    SumAll(usize),
    MeanAll(usize),
    LogSumExp(usize),
    LogSoftmax(usize, Axis),
    Concat(Vec<usize>),
    Split { src: usize, start: usize },
    StopGradient,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Neg(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::LogSumExp(a)
            | Op::LogSoftmax(a, _)
            | Op::Split { src: a, .. } => self.nodes[*a].requires_grad,
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[*p].requires_grad),
        };
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.derived(value, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.derived(value, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "subtract", |x, y| x - y)?;
        self.derived(value, Op::Sub(a.0, b.0), "subtract")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "multiply", |x, y| x * y)?;
        self.derived(value, Op::Mul(a.0, b.0), "multiply")
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| -x);
        self.derived(value, Op::Neg(a.0), "negate")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::tanh);
        self.derived(value, Op::Tanh(a.0), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::exp);
        self.derived(value, Op::Exp(a.0), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::ln);
        self.derived(value, Op::Log(a.0), "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.derived(value, Op::Square(a.0), "square")
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        let value = reduce(x, axis, T::zero(), |acc, v| acc + v);
        self.derived(value, Op::Sum(a.0), "sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.derived(value, Op::SumAll(a.0), "sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(x.sum() / T::of(x.len() as f64));
        self.derived(value, Op::MeanAll(a.0), "mean")
    }

    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let value = logsumexp(self.value(a), axis)?;
        self.derived(value, Op::LogSumExp(a.0), "logsumexp")
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let value = log_softmax(self.value(a), axis)?;
        self.derived(value, Op::LogSoftmax(a.0, axis), "logsoftmax")
    }

    /// Concatenates along the feature axis (columns).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_cols(&refs)?;
        self.derived(value, Op::Concat(parts.iter().map(|p| p.0).collect()), "concat")
    }

    /// Columns `[start, start + len)`.
    pub fn split(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        self.derived(value, Op::Split { src: a.0, start }, "split")
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse sweep from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_rows(1, 1, vec![T::one()]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: usize, contrib: Tensor<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e = *e + *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, n, p) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![T::zero(); m * n];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, p);
                    self.accumulate(grads, *a, Tensor::from_rows(m, n, ga));
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![T::zero(); n * p];
                    gemm_tn(av.data(), g.data(), &mut gb, m, n, p);
                    self.accumulate(grads, *b, Tensor::from_rows(n, p, gb));
                }
            }
            Op::Add(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                self.accumulate(grads, *a, reduce_to(g, &sa));
                self.accumulate(grads, *b, reduce_to(g, &sb));
            }
            Op::Sub(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                self.accumulate(grads, *a, reduce_to(g, &sa));
                self.accumulate(grads, *b, reduce_to(&g.map(|v| -v), &sb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let ga = broadcast_zip(g, bv, "multiply", |x, y| x * y)?;
                    self.accumulate(grads, *a, reduce_to(&ga, av.shape()));
                }
                if self.nodes[*b].requires_grad {
                    let gb = broadcast_zip(g, av, "multiply", |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_to(&gb, bv.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Tanh(a) => {
                let ga = zip_same(g, y, |gv, yv| gv * (T::one() - yv * yv));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_same(g, y, |gv, yv| gv * yv)),
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, zip_same(g, x, |gv, xv| gv / xv));
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                let two = T::of(2.0);
                self.accumulate(grads, *a, zip_same(g, x, |gv, xv| two * xv * gv));
            }
            Op::Sum(a) => {
                let x = &self.nodes[*a].value;
                let ga = broadcast_zip(&Tensor::zeros(x.rows(), x.cols()), g, "sum", |_, gv| gv)?;
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let x = &self.nodes[*a].value;
                let v = g.item() / T::of(x.len() as f64);
                self.accumulate(grads, *a, Tensor::full(x.rows(), x.cols(), v));
            }
            Op::LogSumExp(a) => {
                // d/dx lse(x) = softmax(x) = exp(x - lse)
                let x = &self.nodes[*a].value;
                let soft = broadcast_zip(x, y, "logsumexp", |xv, lv| (xv - lv).exp())?;
                let ga = broadcast_zip(&soft, g, "logsumexp", |s, gv| s * gv)?;
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                // dx = g - softmax * sum(g)
                let gsum = reduce(g, *axis, T::zero(), |acc, v| acc + v);
                let soft = y.map(T::exp);
                let scaled = broadcast_zip(&soft, &gsum, "logsoftmax", |s, gs| s * gs)?;
                let ga = zip_same(g, &scaled, |gv, sv| gv - sv);
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].requires_grad {
                        self.accumulate(grads, p, g.slice_cols(start, w)?);
                    }
                    start += w;
                }
            }
            Op::Split { src, start } => {
                let x = &self.nodes[*src].value;
                let (rows, cols, w) = (x.rows(), x.cols(), g.cols());
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *src, ga);
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// influence the output through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Like [`get`](Self::get) but materializes zeros of the right shape.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let x = graph.value(v);
                Tensor::zeros(x.rows(), x.cols())
            }
        }
    }
}

fn zip_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_same(a, b, f));
    }
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let (Some(rows), Some(cols)) = (broadcast_dim(ar, br), broadcast_dim(ac, bc)) else {
        return Err(Error::shape(
            op,
            format!("cannot broadcast [{ar}x{ac}] with [{br}x{bc}]"),
        ));
    };
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (ra, rb) = (if ar == 1 { 0 } else { r }, if br == 1 { 0 } else { r });
        for c in 0..cols {
            let (ca, cb) = (if ac == 1 { 0 } else { c }, if bc == 1 { 0 } else { c });
            data.push(f(ad[ra * ac + ca], bd[rb * bc + cb]));
        }
    }
    Ok(Tensor::from_rows(rows, cols, data))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    if shape[0] == 1 && out.rows() != 1 {
        out = reduce(&out, Axis::Rows, T::zero(), |acc, v| acc + v);
    }
    if shape[1] == 1 && out.cols() != 1 {
        out = reduce(&out, Axis::Cols, T::zero(), |acc, v| acc + v);
    }
    out
}

fn reduce<T: Scalar>(x: &Tensor<T>, axis: Axis, init: T, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (rows, cols) = (x.rows(), x.cols());
    match axis {
        Axis::Cols => {
            let data = (0..rows).map(|r| x.row(r).iter().fold(init, |a, &v| f(a, v))).collect();
            Tensor::from_rows(rows, 1, data)
        }
        Axis::Rows => {
            let mut acc = vec![init; cols];
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                    *a = f(*a, v);
                }
            }
            Tensor::from_rows(1, cols, acc)
        }
    }
}

/// Max-shifted `log Σ exp(x)` along `axis`.
pub fn logsumexp<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let reduced_len = match axis {
        Axis::Cols => x.cols(),
        Axis::Rows => x.rows(),
    };
    if reduced_len == 0 {
        return Err(Error::shape("logsumexp", "empty reduction axis"));
    }
    let max = reduce(x, axis, T::neg_infinity(), T::max);
    let shifted_sum = reduce(
        &broadcast_zip(x, &max, "logsumexp", |v, m| (v - m).exp())?,
        axis,
        T::zero(),
        |a, v| a + v,
    );
    Ok(zip_same(&max, &shifted_sum, |m, s| m + s.ln()))
}

/// `x - logsumexp(x)` along `axis`; every output is ≤ 0.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let lse = logsumexp(x, axis)?;
    broadcast_zip(x, &lse, "logsoftmax", |v, l| v - l)
}
