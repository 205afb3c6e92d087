use std::cell::{Cell, Ref, RefCell};

use super::{kernels, matmul_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, S),
    AddScalar(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Cos(usize),
    Sin(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    LogSoftmax(usize),
    Transpose(usize),
    StopGradient,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Cos(_) => "cos",
            Op::Sin(_) => "sin",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Transpose(_) => "transpose",
            Op::StopGradient => "stop_gradient",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only computation tape.
///
/// Nodes are never removed; build a fresh graph per step.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    finite_check: Cell<bool>,
    first_nonfinite: RefCell<Option<String>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
pub struct Var<'g, S> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Var<'_, S> {}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            finite_check: Cell::new(false),
            first_nonfinite: RefCell::new(None),
        }
    }

    /// When enabled, the first operation producing a non-finite value is
    /// remembered and reported by [`Graph::first_nonfinite`].
    pub fn set_finite_check(&self, on: bool) {
        self.finite_check.set(on);
    }

    pub fn first_nonfinite(&self) -> Option<String> {
        self.first_nonfinite.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: &Tensor<S>) -> Var<'_, S> {
        self.push(value.clone(), Op::Leaf, true, None)
    }

    /// Trainable leaf carrying a name used in error messages.
    pub fn param_named(&self, name: &str, value: &Tensor<S>) -> Var<'_, S> {
        self.push(value.clone(), Op::Leaf, true, Some(name.to_string()))
    }

    /// Leaf that receives a gradient but is not a model parameter,
    /// e.g. an input being attacked.
    pub fn input(&self, value: &Tensor<S>) -> Var<'_, S> {
        self.push(value.clone(), Op::Leaf, true, Some("input".to_string()))
    }

    pub fn constant(&self, value: &Tensor<S>) -> Var<'_, S> {
        self.push(value.clone(), Op::Leaf, false, None)
    }

    pub fn constant_owned(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.push(Tensor::scalar(value), Op::Leaf, false, None)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: Option<String>) -> Var<'_, S> {
        if self.finite_check.get() && !value.all_finite() {
            let mut first = self.first_nonfinite.borrow_mut();
            if first.is_none() {
                *first = Some(op.name().to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are retained for leaves only. A non-finite leaf gradient is
    /// reported with the leaf's name.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads)?;
        }
        let mut out = vec![None; n];
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if !g.all_finite() {
                    let name = node.name.clone().unwrap_or_else(|| format!("leaf#{i}"));
                    return Err(Error::NonFiniteGradient(name));
                }
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], nodes: &[Node<S>], id: usize, g: Tensor<S>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign_scaled(&g, S::one()),
        slot @ None => *slot = Some(g),
    }
}

fn unary<S: Scalar>(g: &Tensor<S>, a: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = g.data().iter().zip(a.data()).map(|(&gi, &ai)| f(gi, ai)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("unary gradient shape")
}

fn backprop<S: Scalar>(nodes: &[Node<S>], i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
    let out = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    match &nodes[i].op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.reduce_to(val(*a).shape()));
            accumulate(grads, nodes, *b, g.reduce_to(val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.reduce_to(val(*a).shape()));
            accumulate(grads, nodes, *b, g.map(|x| -x).reduce_to(val(*b).shape()));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.zip_map(val(*b), "mul", |x, y| x * y)?;
                accumulate(grads, nodes, *a, ga.reduce_to(val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                let gb = g.zip_map(val(*a), "mul", |x, y| x * y)?;
                accumulate(grads, nodes, *b, gb.reduce_to(val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.zip_map(val(*b), "div", |x, y| x / y)?;
                accumulate(grads, nodes, *a, ga.reduce_to(val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -out / b
                let t = out.zip_map(val(*b), "div", |o, y| o / y)?;
                let gb = g.zip_map(&t, "mul", |x, y| -x * y)?;
                accumulate(grads, nodes, *b, gb.reduce_to(val(*b).shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.map(|x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, g.map(|x| x * c))
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(val(*a).shape(), val(*b).shape())?;
            if nodes[*a].requires_grad {
                let mut ga = vec![S::zero(); m * k];
                kernels::gemm_nt(g.data(), val(*b).data(), &mut ga, m, n, k);
                accumulate(grads, nodes, *a, Tensor::new(vec![m, k], ga)?);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![S::zero(); k * n];
                kernels::gemm_tn(val(*a).data(), g.data(), &mut gb, m, k, n);
                accumulate(grads, nodes, *b, Tensor::new(vec![k, n], gb)?);
            }
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, unary(g, out, |gi, o| gi * o)),
        Op::Log(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| gi / x)),
        Op::Tanh(a) => accumulate(grads, nodes, *a, unary(g, out, |gi, o| gi * (S::one() - o * o))),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, unary(g, out, |gi, o| gi * o * (S::one() - o))),
        Op::Softplus(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| gi * x.sigmoid())),
        Op::Sqrt(a) => accumulate(grads, nodes, *a, unary(g, out, |gi, o| gi / (o + o))),
        Op::Square(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| gi * (x + x))),
        Op::Abs(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| gi * x.signum())),
        Op::Cos(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| -gi * x.sin())),
        Op::Sin(a) => accumulate(grads, nodes, *a, unary(g, val(*a), |gi, x| gi * x.cos())),
        Op::Sum(a) => {
            let gs = g.data()[0];
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), gs));
        }
        Op::Mean(a) => {
            let n = S::from_usize(val(*a).len().max(1)).unwrap_or_else(S::one);
            let gs = g.data()[0] / n;
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), gs));
        }
        Op::SumAxis(a) => accumulate(grads, nodes, *a, g.broadcast_to(val(*a).shape())?),
        Op::BroadcastTo(a) => accumulate(grads, nodes, *a, g.reduce_to(val(*a).shape())),
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.reshape(val(*a).shape().to_vec())?),
        Op::Concat(parts, axis) => {
            let rows = g.rows();
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let piece = if *axis == 0 {
                    let c = ps[0] * cols;
                    let d = g.data()[offset..offset + c].to_vec();
                    offset += c;
                    d
                } else {
                    let w = ps[1];
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    offset += w;
                    d
                };
                accumulate(grads, nodes, p, Tensor::new(ps, piece)?);
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()?),
        Op::LogSoftmax(a) => {
            // g - softmax * rowsum(g)
            let cols = out.cols();
            let mut ga = g.clone();
            for r in 0..out.len() / cols.max(1) {
                let grow = &g.data()[r * cols..(r + 1) * cols];
                let s: S = grow.iter().copied().sum();
                let orow = &out.data()[r * cols..(r + 1) * cols];
                for (j, v) in ga.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    *v = grow[j] - orow[j].exp() * s;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
    }
    Ok(())
}

/// Leaf gradients returned by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf.
    ///
    /// # Panics
    /// If `v` is not a gradient-carrying leaf of the graph that produced these.
    pub fn wrt(&self, v: Var<'_, S>) -> &Tensor<S> {
        self.get(v).expect("no gradient for this variable")
    }

    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Tensor<S> {
        self.graph.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Result<S> {
        self.graph.value_ref(self.id).item()
    }

    fn unary(self, op: Op<S>, f: impl Fn(S) -> S) -> Self {
        let value = self.graph.value_ref(self.id).map(f);
        let rg = self.requires_grad();
        self.graph.push(value, op, rg, None)
    }

    fn binary(self, other: Self, name: &'static str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        let value = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            a.zip_map(&b, name, f)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, op, rg, None))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Self {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: S) -> Self {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: S) -> Self {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            a.matmul(&b)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), rg, None))
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), S::exp)
    }

    pub fn log(self) -> Self {
        self.unary(Op::Log(self.id), S::ln)
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), S::tanh)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), S::sigmoid)
    }

    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), S::softplus)
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), S::sqrt)
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Self {
        self.unary(Op::Abs(self.id), S::abs)
    }

    pub fn cos(self) -> Self {
        self.unary(Op::Cos(self.id), S::cos)
    }

    pub fn sin(self) -> Self {
        self.unary(Op::Sin(self.id), S::sin)
    }

    /// Sum of all elements, as a rank-0 variable.
    pub fn sum(self) -> Self {
        let value = Tensor::scalar(self.graph.value_ref(self.id).sum());
        let rg = self.requires_grad();
        self.graph.push(value, Op::Sum(self.id), rg, None)
    }

    pub fn mean(self) -> Self {
        let value = Tensor::scalar(self.graph.value_ref(self.id).mean());
        let rg = self.requires_grad();
        self.graph.push(value, Op::Mean(self.id), rg, None)
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let value = self.graph.value_ref(self.id).sum_axis(axis)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::SumAxis(self.id), rg, None))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let value = self.graph.value_ref(self.id).broadcast_to(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::BroadcastTo(self.id), rg, None))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.graph.value_ref(self.id).reshape(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Reshape(self.id), rg, None))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(self) -> Self {
        let value = {
            let a = self.graph.value_ref(self.id);
            let cols = a.cols().max(1);
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            out
        };
        let rg = self.requires_grad();
        self.graph.push(value, Op::LogSoftmax(self.id), rg, None)
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.graph.value_ref(self.id).transpose()?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Transpose(self.id), rg, None))
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(self) -> Self {
        let value = self.value();
        self.graph.push(value, Op::StopGradient, false, None)
    }
}

/// Concatenates matrices along `axis` (0 = rows, 1 = columns).
pub fn concat<'g, S: Scalar>(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let graph = first.graph;
    let shapes: Vec<Vec<usize>> = parts.iter().map(Var::shape).collect();
    if axis > 1 || shapes.iter().any(|s| s.len() != 2) {
        return Err(Error::Dimension {
            op: "concat",
            lhs: shapes[0].clone(),
            rhs: vec![axis],
        });
    }
    let keep = 1 - axis;
    for s in &shapes[1..] {
        if s[keep] != shapes[0][keep] {
            return Err(Error::Dimension {
                op: "concat",
                lhs: shapes[0].clone(),
                rhs: s.clone(),
            });
        }
    }
    let value = if axis == 0 {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(graph.value_ref(p.id).data());
        }
        let rows = shapes.iter().map(|s| s[0]).sum::<usize>();
        Tensor::new(vec![rows, shapes[0][1]], data)?
    } else {
        let rows = shapes[0][0];
        let cols = shapes.iter().map(|s| s[1]).sum::<usize>();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(graph.value_ref(p.id).row_slice(r));
            }
        }
        Tensor::new(vec![rows, cols], data)?
    };
    let rg = parts.iter().any(Var::requires_grad);
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(value, Op::Concat(ids, axis), rg, None))
}
