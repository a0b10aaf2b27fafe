//! Define-by-run tape and the reverse sweep.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::gemm::{gemm, View, ViewMut};
use super::{AutodiffError, Result, Tensor};

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right shape is a trailing suffix of the left shape (bias pattern).
    Suffix,
    /// Right operand holds a single value.
    Scalar,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Sub {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Shift {
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Relu {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
    },
    Abs {
        a: usize,
    },
    MaxScalar {
        a: usize,
        c: f64,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    /// Forward value supplied by the caller, gradient passed straight to `a`.
    StraightThrough {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } | Op::MatMul { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Scale { a, .. }
            | Op::Shift { a }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanAxis { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Abs { a }
            | Op::MaxScalar { a, .. }
            | Op::Softmax { a, .. }
            | Op::StraightThrough { a } => vec![*a],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records operations in execution order so gradients can be swept backwards.
///
/// A tape is single-threaded; create one per forward/backward cycle.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::with_capacity(256),
                consumed: false,
            }),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(
            value.is_finite()
                || matches!(op, Op::Leaf | Op::Log { .. })
                || op.inputs().iter().any(|&i| !inner.nodes[i].value.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. The tape cannot be swept twice.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.len() != 1 || loss_node.value.rank() > 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        inner.consumed = true;
        let nodes = &inner.nodes[..=loss.id];
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else if node.requires_grad {
                // Intermediate gradients are dropped once propagated.
                propagate(nodes, id, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse sweep: gradients of every leaf that influenced the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it participated.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::wrt`] but zero-filled when `var` did not influence the loss.
    pub fn wrt_or_zero(&self, var: Var<'_>) -> Vec<f64> {
        match self.wrt(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.tape.value(var.id).len()],
        }
    }
}

/// Adds `g` into the gradient of `id`, copying instead of zero-fill on first touch.
fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
        empty => *empty = Some(g.to_vec()),
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Split `shape` around `axis` into (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_broadcast(g: &[f64], b_len: usize, bc: Broadcast, mut f: impl FnMut(usize, usize, f64)) {
    // f(i_out, i_b, grad)
    match bc {
        Broadcast::Same => g.iter().enumerate().for_each(|(i, &gi)| f(i, i, gi)),
        Broadcast::Suffix => g.iter().enumerate().for_each(|(i, &gi)| f(i, i % b_len, gi)),
        Broadcast::Scalar => g.iter().enumerate().for_each(|(i, &gi)| f(i, 0, gi)),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, *a, g);
            if sign > 0.0 && matches!(bc, Broadcast::Same) {
                accumulate(grads, nodes, *b, g);
                return;
            }
            let b_len = nodes[*b].value.len();
            if let Some(gb) = slot(grads, nodes, *b) {
                reduce_broadcast(g, b_len, *bc, |_, j, gi| gb[j] += sign * gi);
            }
        }
        Op::Mul { a, b, bc } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let b_len = bv.len();
            if nodes[*a].requires_grad {
                let ga = slot(grads, nodes, *a).expect("requires grad");
                reduce_broadcast(g, b_len, *bc, |i, j, gi| ga[i] += gi * bv[j]);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                reduce_broadcast(g, b_len, *bc, |i, j, gi| gb[j] += gi * av[i]);
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
            }
        }
        Op::Shift { a } | Op::Reshape { a } | Op::StraightThrough { a } => accumulate(grads, nodes, *a, g),
        Op::MatMul { a, b } => {
            let (m, k) = nodes[*a].value.dims2().expect("matmul lhs");
            let n = nodes[*b].value.shape()[1];
            let gv = View::dense(g, m, n);
            if nodes[*a].requires_grad {
                let bv = View::dense(nodes[*b].value.data(), k, n);
                let ga = slot(grads, nodes, *a).expect("requires grad");
                gemm(1.0, gv, bv.t(), 1.0, ViewMut::dense(ga, m, k));
            }
            if nodes[*b].requires_grad {
                let av = View::dense(nodes[*a].value.data(), m, k);
                let gb = slot(grads, nodes, *b).expect("requires grad");
                gemm(1.0, av.t(), gv, 1.0, ViewMut::dense(gb, k, n));
            }
        }
        Op::Transpose { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let (r, c) = out.dims2().expect("transpose output");
                // out is (r x c), input is (c x r)
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len_p = nodes[p].value.shape()[*axis];
                if let Some(gp) = slot(grads, nodes, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len_p * inner;
                        for t in 0..len_p * inner {
                            gp[dst + t] += g[src + t];
                        }
                    }
                }
                offset += len_p;
            }
        }
        Op::Slice { a, axis, start } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let (outer, total, inner) = axis_split(&in_shape, *axis);
            let len = out.shape()[*axis];
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        ga[dst + t] += g[src + t];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean { a } => {
            let n = nodes[*a].value.len() as f64;
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_split(nodes[*a].value.shape(), *axis);
            if let Some(ga) = slot(grads, nodes, *a) {
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
        Op::Relu { a } => unary(nodes, grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
        Op::Gelu { a } => unary(nodes, grads, *a, g, |x, _| gelu_grad(x), out),
        Op::Sigmoid { a } => unary(nodes, grads, *a, g, |_, y| y * (1.0 - y), out),
        Op::Tanh { a } => unary(nodes, grads, *a, g, |_, y| 1.0 - y * y, out),
        Op::Exp { a } => unary(nodes, grads, *a, g, |_, y| y, out),
        Op::Log { a } => unary(nodes, grads, *a, g, |x, _| 1.0 / x, out),
        Op::Abs { a } => unary(nodes, grads, *a, g, |x, _| sign0(x), out),
        Op::MaxScalar { a, c } => {
            let c = *c;
            unary(nodes, grads, *a, g, move |x, _| if x > c { 1.0 } else { 0.0 }, out)
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = nodes[*gain].value.len();
            let rows = xhat.len() / c;
            let gv = nodes[*gain].value.data();
            if let Some(gb) = slot(grads, nodes, *bias) {
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, *gain) {
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let cf = c as f64;
                for r in 0..rows {
                    let row = r * c..(r + 1) * c;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for (j, idx) in row.clone().enumerate() {
                        let d = g[idx] * gv[j];
                        sum_d += d;
                        sum_dx += d * xhat[idx];
                    }
                    for (j, idx) in row.enumerate() {
                        let d = g[idx] * gv[j];
                        gx[idx] += inv_std[r] / cf * (cf * d - sum_d - xhat[idx] * sum_dx);
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => attention_backward(nodes, grads, (*q, *k, *v), *heads, probs, g),
    }
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    out: &Tensor,
) {
    let x = nodes[a].value.data();
    let y = out.data();
    if let Some(ga) = slot(grads, nodes, a) {
        for i in 0..ga.len() {
            ga[i] += g[i] * deriv(x[i], y[i]);
        }
    }
}

/// Sign with subgradient 0 at the kink.
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// 0.5 (1 + tanh u) = sigmoid(2u): one exp instead of tanh.
pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    probs: &[f64],
    g: &[f64],
) {
    let (nq, c) = nodes[q].value.dims2().expect("attention q");
    let nk = nodes[k].value.shape()[0];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let need = [nodes[q].requires_grad, nodes[k].requires_grad, nodes[v].requires_grad];
    let mut dq = vec![0.0; if need[0] { nq * c } else { 0 }];
    let mut dk = vec![0.0; if need[1] { nk * c } else { 0 }];
    let mut dv = vec![0.0; if need[2] { nk * c } else { 0 }];
    let mut dp = vec![0.0; nq * nk];
    for h in 0..heads {
        let col0 = h * dh;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let pv = View::dense(p, nq, nk);
        let g_h = View::columns(g, nq, c, col0, dh);
        if need[2] {
            gemm(1.0, pv.t(), g_h, 1.0, ViewMut::columns(&mut dv, nk, c, col0, dh));
        }
        if !(need[0] || need[1]) {
            continue;
        }
        // dP = dO_h V_h^T
        gemm(
            1.0,
            g_h,
            View::columns(vv, nk, c, col0, dh).t(),
            0.0,
            ViewMut::dense(&mut dp, nq, nk),
        );
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
        for r in 0..nq {
            let row = r * nk..(r + 1) * nk;
            let dot: f64 = row.clone().map(|i| dp[i] * p[i]).sum();
            for i in row {
                dp[i] = p[i] * (dp[i] - dot) * scale;
            }
        }
        let ds = View::dense(&dp, nq, nk);
        if need[0] {
            gemm(
                1.0,
                ds,
                View::columns(kv, nk, c, col0, dh),
                1.0,
                ViewMut::columns(&mut dq, nq, c, col0, dh),
            );
        }
        if need[1] {
            gemm(
                1.0,
                ds.t(),
                View::columns(qv, nq, c, col0, dh),
                1.0,
                ViewMut::columns(&mut dk, nk, c, col0, dh),
            );
        }
    }
    for (id, d) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(acc) = slot(grads, nodes, id) {
            acc.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
        }
    }
}
