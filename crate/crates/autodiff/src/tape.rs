//! Dynamically recorded tape for reverse mode, with forward-mode tangents
//! carried alongside every primal value.
//!
//! A node may hold a tangent (dual part). Tangents are computed eagerly
//! when any parent carries one, so a single primal pass also yields the
//! Jacobian-vector product along the seeded direction. Tangents are plain
//! values: reverse mode only differentiates primal paths, and the only way
//! to feed a tangent back into the graph is [`Var::tangent_const`], which
//! enters as a constant (stop-gradient).

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::error::AdError;
use crate::tensor::{broadcast_zip, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Gelu,
    Silu,
    Sin,
    Cos,
    Sqrt,
    Exp,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    /// Value and derivative in one evaluation.
    fn apply_with_deriv(self, x: f64) -> (f64, f64) {
        match self {
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                (0.5 * x * (1.0 + th), 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
            }
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                (x * s, s * (1.0 + x * (1.0 - s)))
            }
            _ => {
                let y = self.apply(x);
                (y, self.deriv(x, y))
            }
        }
    }

    /// d/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    BroadcastTo(usize),
    Concat(Vec<usize>, usize),
    Slice { a: usize, axis: usize, start: usize },
    SumAll(usize),
    SumAxis(usize, usize),
    /// Input, function and the elementwise derivative cached at record time.
    Unary(usize, Unary, Option<Rc<Tensor>>),
    Softmax(usize),
    LayerNorm(usize, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(..) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Unary(_, u, _) => u.name(),
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layernorm",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    tangent: Option<Rc<Tensor>>,
    op: Op,
    /// Reverse mode reaches a tracked leaf from this node.
    tracked: bool,
}

/// Records primitive applications for one differentiation episode.
///
/// Confined to one thread; independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<AdError>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, tangent: Option<Tensor>, op: Op, tracked: bool) -> Var<'_> {
        if self.fault.borrow().is_none() {
            let bad = !value.is_finite() || tangent.as_ref().is_some_and(|t| !t.is_finite());
            if bad {
                *self.fault.borrow_mut() = Some(AdError::NonFinite { op: op.name() });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), tangent: tangent.map(Rc::new), op, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// First non-finite result recorded on this tape, if any.
    pub fn fault(&self) -> Option<AdError> {
        self.fault.borrow().clone()
    }

    /// Untracked value with zero tangent.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, Op::Leaf, false)
    }

    /// Differentiable leaf (reverse mode).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, Op::Leaf, true)
    }

    /// Untracked leaf seeded with a forward-mode tangent.
    pub fn dual(&self, value: Tensor, tangent: Tensor) -> Var<'_> {
        assert_eq!(value.shape(), tangent.shape(), "dual primal/tangent shape mismatch");
        self.push(value, Some(tangent), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tangent_of(&self, id: usize) -> Option<Rc<Tensor>> {
        self.nodes.borrow()[id].tangent.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AdError> {
        if let Some(e) = self.fault() {
            return Err(e);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AdError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let mut send = |pid: usize, contrib: Tensor| {
                if !nodes[pid].tracked {
                    return;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.sum_to(nodes[*a].value.shape()));
                    send(*b, g.sum_to(nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, g.sum_to(nodes[*a].value.shape()));
                    send(*b, g.scale(-1.0).sum_to(nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].tracked {
                        send(*a, broadcast_zip(&g, bv, |x, y| x * y).sum_to(av.shape()));
                    }
                    if nodes[*b].tracked {
                        send(*b, broadcast_zip(&g, av, |x, y| x * y).sum_to(bv.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].tracked {
                        send(*a, broadcast_zip(&g, bv, |x, y| x / y).sum_to(av.shape()));
                    }
                    if nodes[*b].tracked {
                        // d(a/b)/db = -out/b
                        let t = broadcast_zip(&g, out, |x, o| -x * o);
                        send(*b, broadcast_zip(&t, bv, |x, y| x / y).sum_to(bv.shape()));
                    }
                }
                Op::Neg(a) => send(*a, g.scale(-1.0)),
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::Offset(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].tracked {
                        send(*a, g.matmul_t(bv, false, true));
                    }
                    if nodes[*b].tracked {
                        send(*b, av.matmul_t(&g, true, false));
                    }
                }
                Op::Bmm { a, b, ta, tb } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].tracked {
                        let ga = if *ta { bv.bmm_t(&g, *tb, true) } else { g.bmm_t(bv, false, !*tb) };
                        send(*a, ga);
                    }
                    if nodes[*b].tracked {
                        let gb = if *tb { g.bmm_t(av, true, *ta) } else { av.bmm_t(&g, !*ta, false) };
                        send(*b, gb);
                    }
                }
                Op::Reshape(a) => send(*a, g.reshape(nodes[*a].value.shape())),
                Op::Permute(a, perm) => send(*a, g.permute(&invert(perm))),
                Op::BroadcastTo(a) => send(*a, g.sum_to(nodes[*a].value.shape())),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        send(p, g.slice_axis(*axis, start, start + len));
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    send(*a, g.pad_axis(*axis, *start, nodes[*a].value.shape()))
                }
                Op::SumAll(a) => send(*a, Tensor::full(nodes[*a].value.shape(), g.item())),
                Op::SumAxis(a, axis) => send(*a, g.expand_axis(*axis, nodes[*a].value.shape()[*axis])),
                Op::Unary(a, _, d) => {
                    let d = d.as_ref().expect("tracked unary nodes cache their derivative");
                    send(*a, g.zip_map(d, |gi, di| gi * di));
                }
                Op::Softmax(a) => send(*a, softmax_linear(out, &g)),
                Op::LayerNorm(a, eps) => send(*a, layernorm_linear(&nodes[*a].value, out, &g, *eps)),
            }
        }
        Ok(Gradients { grads })
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Jacobian action of softmax (last axis) at output `y`; the Jacobian is
/// symmetric so this serves both modes.
fn softmax_linear(y: &Tensor, d: &Tensor) -> Tensor {
    let w = *y.shape().last().unwrap();
    let mut out = Vec::with_capacity(y.len());
    for (yr, dr) in y.data().chunks(w).zip(d.data().chunks(w)) {
        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(dr).map(|(a, b)| a * (b - s)));
    }
    Tensor::from_vec(y.shape().to_vec(), out)
}

/// Jacobian action of last-axis normalization; symmetric, shared by both
/// modes.
fn layernorm_linear(x: &Tensor, y: &Tensor, d: &Tensor, eps: f64) -> Tensor {
    let w = *x.shape().last().unwrap();
    let inv_w = 1.0 / w as f64;
    let mut out = Vec::with_capacity(x.len());
    for ((xr, yr), dr) in x.data().chunks(w).zip(y.data().chunks(w)).zip(d.data().chunks(w)) {
        let mean = xr.iter().sum::<f64>() * inv_w;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_w;
        let inv_std = 1.0 / (var + eps).sqrt();
        let md = dr.iter().sum::<f64>() * inv_w;
        let myd = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() * inv_w;
        out.extend(yr.iter().zip(dr).map(|(yi, di)| (di - md - yi * myd) * inv_std));
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn softmax_value(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("softmax on scalar");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn layernorm_value(x: &Tensor, eps: f64) -> Tensor {
    let w = *x.shape().last().expect("layernorm on scalar");
    let inv_w = 1.0 / w as f64;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(w) {
        let mean = row.iter().sum::<f64>() * inv_w;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_w;
        let inv_std = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv_std));
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Forward-mode tangent; zero when no seeded input reaches this node.
    pub fn tangent(&self) -> Tensor {
        match self.tape.tangent_of(self.id) {
            Some(t) => (*t).clone(),
            None => Tensor::zeros(self.value().shape()),
        }
    }

    pub fn has_tangent(&self) -> bool {
        self.tape.tangent_of(self.id).is_some()
    }

    /// Identity on values; blocks both the adjoint and the tangent.
    pub fn stopgrad(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    /// The tangent of this node as a constant (stop-gradient) value.
    pub fn tangent_const(self) -> Var<'t> {
        self.tape.constant(self.tangent())
    }

    fn unary_node(self, value: Tensor, tangent: Option<Tensor>, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, tangent, op, tracked)
    }

    fn binary_node(self, other: Var<'t>, value: Tensor, tangent: Option<Tensor>, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(other.id);
        self.tape.push(value, tangent, op, tracked)
    }

    fn tangents2(self, other: Var<'t>) -> (Option<Rc<Tensor>>, Option<Rc<Tensor>>) {
        (self.tape.tangent_of(self.id), self.tape.tangent_of(other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = broadcast_zip(&a, &b, |x, y| x + y);
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(ta), None) => Some(ta.broadcast_to(value.shape())),
            (None, Some(tb)) => Some(tb.broadcast_to(value.shape())),
            (Some(ta), Some(tb)) => Some(broadcast_zip(&ta, &tb, |x, y| x + y)),
        };
        self.binary_node(other, value, tangent, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = broadcast_zip(&a, &b, |x, y| x - y);
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(ta), None) => Some(ta.broadcast_to(value.shape())),
            (None, Some(tb)) => Some(tb.scale(-1.0).broadcast_to(value.shape())),
            (Some(ta), Some(tb)) => Some(broadcast_zip(&ta, &tb, |x, y| x - y)),
        };
        self.binary_node(other, value, tangent, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = broadcast_zip(&a, &b, |x, y| x * y);
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(ta), None) => Some(broadcast_zip(&ta, &b, |x, y| x * y)),
            (None, Some(tb)) => Some(broadcast_zip(&a, &tb, |x, y| x * y)),
            (Some(ta), Some(tb)) => {
                let l = broadcast_zip(&ta, &b, |x, y| x * y);
                let r = broadcast_zip(&a, &tb, |x, y| x * y);
                Some(l.zip_map(&r, |x, y| x + y))
            }
        };
        self.binary_node(other, value, tangent, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = broadcast_zip(&a, &b, |x, y| x / y);
        let ta_term = |ta: &Tensor| broadcast_zip(ta, &b, |x, y| x / y);
        // -(a/b) * tb / b
        let tb_term = |tb: &Tensor| {
            let q = broadcast_zip(&value, tb, |o, t| -o * t);
            broadcast_zip(&q, &b, |x, y| x / y)
        };
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(ta), None) => Some(ta_term(&ta)),
            (None, Some(tb)) => Some(tb_term(&tb)),
            (Some(ta), Some(tb)) => Some(ta_term(&ta).zip_map(&tb_term(&tb), |x, y| x + y)),
        };
        self.binary_node(other, value, tangent, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.value().scale(-1.0);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.scale(-1.0));
        self.unary_node(value, tangent, Op::Neg(self.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let value = self.value().scale(k);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.scale(k));
        self.unary_node(value, tangent, Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let value = self.value().map(|v| v + k);
        let tangent = self.tape.tangent_of(self.id).map(|t| (*t).clone());
        self.unary_node(value, tangent, Op::Offset(self.id))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b);
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(ta), None) => Some(ta.matmul(&b)),
            (None, Some(tb)) => Some(a.matmul(&tb)),
            (Some(ta), Some(tb)) => Some(ta.matmul(&b).zip_map(&a.matmul(&tb), |x, y| x + y)),
        };
        self.binary_node(other, value, tangent, Op::MatMul(self.id, other.id))
    }

    /// Batched `[b,m,k] x [b,k,n]`, with optional transpose of either
    /// operand's trailing two axes.
    pub fn bmm(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = a.bmm_t(&b, ta, tb);
        let tangent = match self.tangents2(other) {
            (None, None) => None,
            (Some(da), None) => Some(da.bmm_t(&b, ta, tb)),
            (None, Some(db)) => Some(a.bmm_t(&db, ta, tb)),
            (Some(da), Some(db)) => {
                Some(da.bmm_t(&b, ta, tb).zip_map(&a.bmm_t(&db, ta, tb), |x, y| x + y))
            }
        };
        self.binary_node(other, value, tangent, Op::Bmm { a: self.id, b: other.id, ta, tb })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = self.value().reshape(shape);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.reshape(shape));
        self.unary_node(value, tangent, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let value = self.value().permute(perm);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.permute(perm));
        self.unary_node(value, tangent, Op::Permute(self.id, perm.to_vec()))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let value = self.value().broadcast_to(shape);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.broadcast_to(shape));
        self.unary_node(value, tangent, Op::BroadcastTo(self.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis);
        let any_tangent = parts.iter().any(|p| p.has_tangent());
        let tangent = any_tangent.then(|| {
            let ts: Vec<Tensor> = parts.iter().map(|p| p.tangent()).collect();
            let tr: Vec<&Tensor> = ts.iter().collect();
            Tensor::concat(&tr, axis)
        });
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        tape.push(value, tangent, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), tracked)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let value = self.value().slice_axis(axis, start, end);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.slice_axis(axis, start, end));
        self.unary_node(value, tangent, Op::Slice { a: self.id, axis, start })
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum_all());
        let tangent = self.tape.tangent_of(self.id).map(|t| Tensor::scalar(t.sum_all()));
        self.unary_node(value, tangent, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let value = self.value().sum_axis(axis);
        let tangent = self.tape.tangent_of(self.id).map(|t| t.sum_axis(axis));
        self.unary_node(value, tangent, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let d = self.value().shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / d)
    }

    fn unary(self, u: Unary) -> Var<'t> {
        let x = self.value();
        let tangent_in = self.tape.tangent_of(self.id);
        if !self.tape.tracked(self.id) && tangent_in.is_none() {
            let value = x.map(|v| u.apply(v));
            return self.unary_node(value, None, Op::Unary(self.id, u, None));
        }
        let mut value = Vec::with_capacity(x.len());
        let mut deriv = Vec::with_capacity(x.len());
        for &xi in x.data() {
            let (y, d) = u.apply_with_deriv(xi);
            value.push(y);
            deriv.push(d);
        }
        let value = Tensor::from_vec(x.shape().to_vec(), value);
        let deriv = Tensor::from_vec(x.shape().to_vec(), deriv);
        let tangent = tangent_in.map(|t| t.zip_map(&deriv, |ti, di| ti * di));
        self.unary_node(value, tangent, Op::Unary(self.id, u, Some(Rc::new(deriv))))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = softmax_value(&self.value());
        let tangent = self.tape.tangent_of(self.id).map(|t| softmax_linear(&value, &t));
        self.unary_node(value, tangent, Op::Softmax(self.id))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let value = layernorm_value(&x, eps);
        let tangent = self.tape.tangent_of(self.id).map(|t| layernorm_linear(&x, &value, &t, eps));
        self.unary_node(value, tangent, Op::LayerNorm(self.id, eps))
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.scale(k)
    }
}

