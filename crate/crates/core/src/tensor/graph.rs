//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op reads nodes that
//! already exist, so insertion order is a topological order and the backward
//! pass simply walks the tape in reverse. Graphs are built fresh for every
//! forward pass and dropped afterwards.

use std::cell::{Ref, RefCell};

use super::kernels::ConvGeom;
use super::kernels::{self, ConvDims};
use super::{check_shape, Element, Tensor};
use crate::error::{Error, Result};

pub type VarId = usize;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, F),
    Shift(VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Exp(VarId),
    Log(VarId),
    Clip(VarId, F, F),
    MatMul(VarId, VarId),
    Sum {
        x: VarId,
        map: Vec<usize>,
        scale: F,
    },
    Max {
        x: VarId,
        argmax: Vec<usize>,
    },
    Reshape(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        geom: ConvGeom,
    },
    Upsample2(VarId),
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    GlobalAvgPool(VarId),
    Softmax(VarId),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<VarId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _)
            | Shift(a)
            | Relu(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Clip(a, _, _)
            | Reshape(a)
            | Upsample2(a)
            | GlobalAvgPool(a)
            | Softmax(a) => vec![*a],
            Sum { x, .. } | Max { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The tape. One thread drives a graph at a time.
pub struct Graph<F: Element = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Element = f32> {
    graph: &'g Graph<F>,
    id: VarId,
}

impl<F: Element> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: VarId) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_scalar_like<F>(t: &Tensor<F>) -> bool {
    t.data.len() == 1
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs of each node, in insertion order.
    pub fn topology(&self) -> Vec<Vec<VarId>> {
        self.nodes.borrow().iter().map(|n| n.op.inputs()).collect()
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn var(&self, id: VarId) -> Var<'_, F> {
        assert!(id < self.len(), "node {id} does not exist");
        Var { graph: self, id }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Result<Var<'_, F>> {
        let mut nodes = self.nodes.borrow_mut();
        let inputs = op.inputs();
        if cfg!(debug_assertions) && value.has_nan() && !inputs.iter().any(|&i| nodes[i].value.has_nan()) {
            return Err(Error::Numeric(format!(
                "{op:?} produced NaN from NaN-free inputs",
                op = std::mem::discriminant(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: VarId) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<F>>> = (0..=loss.id).map(|_| None).collect();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            pending[loss.id] = Some(vec![F::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
                continue;
            }
            for (input, grad) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match pending[input].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += *b),
                    None => pending[input] = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian products of one node: `(input id, dLoss/dInput)` pairs.
fn local_grads<F: Element>(nodes: &[Node<F>], node: &Node<F>, g: &[F]) -> Vec<(VarId, Vec<F>)> {
    let val = |id: VarId| &nodes[id].value;
    let wants = |id: VarId| nodes[id].requires_grad;
    let out = &node.value.data;
    // Reduce a full-size gradient onto a possibly broadcast operand.
    let fit = |id: VarId, full: Vec<F>| -> Vec<F> {
        if val(id).data.len() == full.len() {
            full
        } else {
            vec![full.into_iter().sum()]
        }
    };
    let bcast = |t: &Tensor<F>, i: usize| if t.data.len() == 1 { t.data[0] } else { t.data[i] };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, fit(*a, g.to_vec())), (*b, fit(*b, g.to_vec()))],
        Op::Sub(a, b) => vec![
            (*a, fit(*a, g.to_vec())),
            (*b, fit(*b, g.iter().map(|&v| -v).collect())),
        ],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let mut v = Vec::new();
            if wants(*a) {
                v.push((
                    *a,
                    fit(*a, g.iter().enumerate().map(|(i, &gi)| gi * bcast(tb, i)).collect()),
                ));
            }
            if wants(*b) {
                v.push((
                    *b,
                    fit(*b, g.iter().enumerate().map(|(i, &gi)| gi * bcast(ta, i)).collect()),
                ));
            }
            v
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let mut v = Vec::new();
            if wants(*a) {
                v.push((
                    *a,
                    fit(*a, g.iter().enumerate().map(|(i, &gi)| gi / bcast(tb, i)).collect()),
                ));
            }
            if wants(*b) {
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let d = bcast(tb, i);
                        -gi * bcast(ta, i) / (d * d)
                    })
                    .collect();
                v.push((*b, fit(*b, gb)));
            }
            v
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
        Op::Shift(a) => vec![(*a, g.to_vec())],
        Op::Relu(a) => {
            let x = &val(*a).data;
            vec![(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                    .collect(),
            )]
        }
        Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(&gi, &y)| gi * y * (F::one() - y)).collect())],
        Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(&gi, &y)| gi * y).collect())],
        Op::Log(a) => {
            let x = &val(*a).data;
            vec![(*a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect())]
        }
        Op::Clip(a, lo, hi) => {
            let x = &val(*a).data;
            vec![(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { F::zero() })
                    .collect(),
            )]
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let mut v = Vec::new();
            if wants(*a) {
                let mut ga = vec![F::zero(); m * k];
                F::gemm(m, n, k, g, false, &tb.data, true, &mut ga, false);
                v.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![F::zero(); k * n];
                F::gemm(k, m, n, &ta.data, true, g, false, &mut gb, false);
                v.push((*b, gb));
            }
            v
        }
        Op::Sum { x, map, scale } => vec![(*x, map.iter().map(|&o| g[o] * *scale).collect())],
        Op::Max { x, argmax } => {
            let mut gx = vec![F::zero(); val(*x).data.len()];
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![(*x, gx)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let d = conv_dims(&tx.shape, &tw.shape, &node.value.shape);
            let (dx, dw, db) = kernels::conv2d_backward(&tx.data, &tw.data, g, &d, *geom, wants(*x), wants(*w));
            let mut v = Vec::new();
            if let Some(dx) = dx {
                v.push((*x, dx));
            }
            if let Some(dw) = dw {
                v.push((*w, dw));
            }
            if let Some(b) = b {
                v.push((*b, db));
            }
            v
        }
        Op::Upsample2(a) => {
            let s = &val(*a).shape;
            vec![(*a, kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]))]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = &val(*x).shape;
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gam = &val(*gamma).data;
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for (gi, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ch] += *gi * *xh;
                        dbeta[ch] += *gi;
                    }
                }
            }
            let mut v = Vec::new();
            if wants(*x) {
                let mut dx = vec![F::zero(); g.len()];
                let m = F::of((n * hw) as f64);
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch];
                    for b in 0..n {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for i in r {
                            dx[i] = if *batch_stats {
                                k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                v.push((*x, dx));
            }
            v.push((*gamma, dgamma));
            v.push((*beta, dbeta));
            v
        }
        Op::GlobalAvgPool(a) => {
            let s = &val(*a).shape;
            let hw = s[2] * s[3];
            let inv = F::one() / F::of(hw as f64);
            let mut gx = Vec::with_capacity(s[0] * s[1] * hw);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi * inv, hw));
            }
            vec![(*a, gx)]
        }
        Op::Softmax(a) => {
            let k = node.value.shape[1];
            let mut gx = vec![F::zero(); g.len()];
            for r in 0..g.len() / k {
                let ys = &out[r * k..(r + 1) * k];
                let gs = &g[r * k..(r + 1) * k];
                let dot: F = ys.iter().zip(gs).map(|(&y, &gi)| y * gi).sum();
                for j in 0..k {
                    gx[r * k + j] = ys[j] * (gs[j] - dot);
                }
            }
            vec![(*a, gx)]
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize], out: &[usize]) -> ConvDims {
    ConvDims {
        n: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        co: w[0],
        k: w[2],
        ho: out[2],
        wo: out[3],
    }
}

impl<'g, F: Element> Var<'g, F> {
    pub fn id(&self) -> VarId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape.clone()
    }

    pub fn value(&self) -> Tensor<F> {
        self.graph.value(self.id).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'g, F>, kind: BinaryKind) -> Result<Var<'g, F>> {
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            let shape = if a.shape == b.shape || is_scalar_like(&b) {
                a.shape.clone()
            } else if is_scalar_like(&a) {
                b.shape.clone()
            } else {
                return Err(Error::Shape(format!(
                    "{kind:?}: shapes {:?} and {:?} do not match",
                    a.shape, b.shape
                )));
            };
            let n: usize = shape.iter().product();
            let pick = |t: &Tensor<F>, i: usize| if t.data.len() == 1 { t.data[0] } else { t.data[i] };
            if cfg!(debug_assertions) && kind == BinaryKind::Div && b.data.iter().any(|v| v.is_zero()) {
                return Err(Error::Numeric("division by exact zero".into()));
            }
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (pick(&a, i), pick(&b, i));
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect();
            Tensor { shape, data }
        };
        let op = match kind {
            BinaryKind::Add => Op::Add(self.id, other.id),
            BinaryKind::Sub => Op::Sub(self.id, other.id),
            BinaryKind::Mul => Op::Mul(self.id, other.id),
            BinaryKind::Div => Op::Div(self.id, other.id),
        };
        self.graph.push(value, op)
    }

    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var<'g, F>> {
        let value = {
            let a = self.graph.value(self.id);
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.graph.push(value, op)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'g, F>> {
        let c = F::of(c);
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    /// Add a constant.
    pub fn shift(self, c: f64) -> Result<Var<'g, F>> {
        let c = F::of(c);
        self.unary(|v| v + c, Op::Shift(self.id))
    }

    pub fn relu(self) -> Result<Var<'g, F>> {
        self.unary(|v| if v > F::zero() { v } else { F::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'g, F>> {
        self.unary(
            |v| {
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn exp(self) -> Result<Var<'g, F>> {
        self.unary(F::exp, Op::Exp(self.id))
    }

    /// Natural log; inputs must be positive.
    pub fn log(self) -> Result<Var<'g, F>> {
        if cfg!(debug_assertions) && self.graph.value(self.id).data.iter().any(|&v| v <= F::zero()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        self.unary(F::ln, Op::Log(self.id))
    }

    pub fn clip(self, lo: f64, hi: f64) -> Result<Var<'g, F>> {
        let (lo, hi) = (F::of(lo), F::of(hi));
        self.unary(|v| v.max(lo).min(hi), Op::Clip(self.id, lo, hi))
    }

    pub fn matmul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Shape(format!("matmul of {:?} and {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![F::zero(); m * n];
            F::gemm(m, k, n, &a.data, false, &b.data, false, &mut data, false);
            Tensor {
                shape: vec![m, n],
                data,
            }
        };
        self.graph.push(value, Op::MatMul(self.id, other.id))
    }

    fn reduce_setup(&self, axes: Option<&[usize]>) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let shape = self.shape();
        let axes: Vec<usize> = match axes {
            None => (0..shape.len()).collect(),
            Some(a) => {
                for &ax in a {
                    if ax >= shape.len() {
                        return Err(Error::Shape(format!("axis {ax} out of range for shape {shape:?}")));
                    }
                }
                let mut a = a.to_vec();
                a.sort_unstable();
                a.dedup();
                a
            }
        };
        let count = axes.iter().map(|&a| shape[a]).product();
        let (out_shape, map) = kernels::reduce_index_map(&shape, &axes);
        Ok((out_shape, map, count))
    }

    fn reduce_sum(self, axes: Option<&[usize]>, mean: bool) -> Result<Var<'g, F>> {
        let (out_shape, map, count) = self.reduce_setup(axes)?;
        let scale = if mean { F::one() / F::of(count as f64) } else { F::one() };
        let value = {
            let x = self.graph.value(self.id);
            let mut data = vec![F::zero(); out_shape.iter().product()];
            for (&o, &v) in map.iter().zip(&x.data) {
                data[o] += v;
            }
            data.iter_mut().for_each(|v| *v *= scale);
            Tensor { shape: out_shape, data }
        };
        self.graph.push(value, Op::Sum { x: self.id, map, scale })
    }

    /// Sum over `axes` (all axes when `None`), dropping reduced axes.
    pub fn sum(self, axes: Option<&[usize]>) -> Result<Var<'g, F>> {
        self.reduce_sum(axes, false)
    }

    pub fn mean(self, axes: Option<&[usize]>) -> Result<Var<'g, F>> {
        self.reduce_sum(axes, true)
    }

    /// Maximum over `axes`; the gradient flows to the first maximal element.
    pub fn max(self, axes: Option<&[usize]>) -> Result<Var<'g, F>> {
        let (out_shape, map, _) = self.reduce_setup(axes)?;
        let (value, argmax) = {
            let x = self.graph.value(self.id);
            let n: usize = out_shape.iter().product();
            let mut data = vec![F::neg_infinity(); n];
            let mut arg = vec![usize::MAX; n];
            for (i, (&o, &v)) in map.iter().zip(&x.data).enumerate() {
                if arg[o] == usize::MAX || v > data[o] {
                    data[o] = v;
                    arg[o] = i;
                }
            }
            (Tensor { shape: out_shape, data }, arg)
        };
        self.graph.push(value, Op::Max { x: self.id, argmax })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let value = self.graph.value(self.id).clone().reshape(shape)?;
        self.graph.push(value, Op::Reshape(self.id))
    }

    /// 2-D convolution of `[N, C, H, W]` by weights `[C', C, k, k]` and optional bias `[C']`.
    pub fn conv2d(self, weight: Var<'g, F>, bias: Option<Var<'g, F>>, geom: ConvGeom) -> Result<Var<'g, F>> {
        let value = {
            let x = self.graph.value(self.id);
            let w = self.graph.value(weight.id);
            if x.shape.len() != 4 || w.shape.len() != 4 || w.shape[2] != w.shape[3] {
                return Err(Error::Shape(format!(
                    "conv2d expects [N,C,H,W] input and [C',C,k,k] weights, got {:?} and {:?}",
                    x.shape, w.shape
                )));
            }
            if x.shape[1] != w.shape[1] {
                return Err(Error::Shape(format!(
                    "conv2d input has {} channels, weights expect {}",
                    x.shape[1], w.shape[1]
                )));
            }
            let k = w.shape[2];
            let (ho, wo) = match (geom.out_extent(x.shape[2], k), geom.out_extent(x.shape[3], k)) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(Error::Shape(format!(
                        "input {}×{} smaller than effective kernel extent {}",
                        x.shape[2],
                        x.shape[3],
                        geom.dilation * (k - 1) + 1
                    )))
                }
            };
            let bias_val = bias.map(|b| self.graph.value(b.id));
            if let Some(b) = &bias_val {
                if b.data.len() != w.shape[0] {
                    return Err(Error::Shape(format!(
                        "bias has {} entries for {} output channels",
                        b.data.len(),
                        w.shape[0]
                    )));
                }
            }
            let out_shape = [x.shape[0], w.shape[0], ho, wo];
            let d = conv_dims(&x.shape, &w.shape, &out_shape);
            let data = kernels::conv2d_forward(
                &x.data,
                &w.data,
                bias_val.as_deref().map(|b| b.data.as_slice()),
                &d,
                geom,
            );
            Tensor {
                shape: out_shape.to_vec(),
                data,
            }
        };
        self.graph.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2(self) -> Result<Var<'g, F>> {
        let value = {
            let x = self.graph.value(self.id);
            let s = spatial(&x.shape, "upsample")?;
            Tensor {
                shape: vec![s[0], s[1], 2 * s[2], 2 * s[3]],
                data: kernels::upsample2_forward(&x.data, s[0] * s[1], s[2], s[3]),
            }
        };
        self.graph.push(value, Op::Upsample2(self.id))
    }

    /// Per-channel normalisation of `[N, C, H, W]` followed by `gamma`/`beta`.
    ///
    /// With `stats == None` the batch moments are used and returned (mean,
    /// biased variance); otherwise the supplied running `(mean, var)` are.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        stats: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<(Var<'g, F>, Option<(Vec<F>, Vec<F>)>)> {
        let (value, xhat, inv_std, batch) = {
            let x = self.graph.value(self.id);
            let s = spatial(&x.shape, "batch_norm")?;
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gam = self.graph.value(gamma.id);
            let bet = self.graph.value(beta.id);
            if gam.data.len() != c || bet.data.len() != c {
                return Err(Error::Shape(format!(
                    "batch_norm over {c} channels with {} gammas and {} betas",
                    gam.data.len(),
                    bet.data.len()
                )));
            }
            let (mean, var, batch) = match stats {
                Some((m, v)) => (m.to_vec(), v.to_vec(), None),
                None => {
                    if n * hw < 2 {
                        return Err(Error::Contract(
                            "batch statistics need at least two values per channel".into(),
                        ));
                    }
                    let (m, v) = kernels::channel_moments(&x.data, n, c, hw);
                    (m.clone(), v.clone(), Some((m, v)))
                }
            };
            let eps = F::of(eps);
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![F::zero(); x.data.len()];
            let mut out = vec![F::zero(); x.data.len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        xhat[i] = (x.data[i] - mean[ch]) * inv_std[ch];
                        out[i] = xhat[i] * gam.data[ch] + bet.data[ch];
                    }
                }
            }
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: out,
                },
                xhat,
                inv_std,
                batch,
            )
        };
        let batch_stats = batch.is_some();
        let var = self.graph.push(
            value,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((var, batch))
    }

    /// `[N, C, H, W]` → `[N, C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'g, F>> {
        let value = {
            let x = self.graph.value(self.id);
            let s = spatial(&x.shape, "global_avg_pool")?;
            let hw = s[2] * s[3];
            let inv = F::one() / F::of(hw as f64);
            Tensor {
                shape: vec![s[0], s[1]],
                data: x.data.chunks(hw).map(|c| c.iter().copied().sum::<F>() * inv).collect(),
            }
        };
        self.graph.push(value, Op::GlobalAvgPool(self.id))
    }

    /// Row-wise softmax of `[N, K]`.
    pub fn softmax(self) -> Result<Var<'g, F>> {
        let value = {
            let x = self.graph.value(self.id);
            if x.shape.len() != 2 || x.shape[1] < 2 {
                return Err(Error::Shape(format!("softmax expects [N, K≥2], got {:?}", x.shape)));
            }
            Tensor {
                shape: x.shape.clone(),
                data: kernels::softmax_rows(&x.data, x.shape[0], x.shape[1]),
            }
        };
        self.graph.push(value, Op::Softmax(self.id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn spatial(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("{what} expects [N,C,H,W], got {shape:?}")));
    }
    check_shape(shape)?;
    Ok([shape[0], shape[1], shape[2], shape[3]])
}
