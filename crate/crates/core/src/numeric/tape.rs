//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in creation order,
//! which is a topological order of the computation graph; [`Tape::backward`]
//! walks it in reverse exactly once. Trainable tensors enter the tape through
//! [`Tape::param`] and their gradients are collected into a [`Gradients`]
//! table indexed like the owning [`ParamStore`].

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{broadcast_offsets, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradient accumulators.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// Operation with a hand-written backward rule.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; `backward` returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Asin,
    Square,
    Powf(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Asin => x.asin(),
            Unary::Square => x * x,
            Unary::Powf(p) => x.powf(p),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => 0.5 / y,
            Unary::Asin => 1.0 / (1.0 - x * x).sqrt(),
            Unary::Square => 2.0 * x,
            Unary::Powf(p) => p * x.powf(p - 1.0),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Affine(usize, f64),
    Unary(Unary, usize),
    Atan2(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Bmm(usize, usize),
    Reshape(usize),
    TransposeLast(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    IndexSelect(usize, Vec<usize>),
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    L2Normalize(usize, f64),
    Clamp(usize, f64, f64),
    Custom(Vec<usize>, Rc<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        self.push_node(Node { value, op, param: None })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_node(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        })
    }

    /// Records a node whose forward value was computed by the caller.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Rc<dyn CustomOp>) -> Var<'t> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(output, Op::Custom(ids, op))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var<'_>, n_params: usize) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));
        let mut out = Gradients::empty(n_params);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                out.accumulate(pid, &g);
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let mut send = |i: usize, t: Tensor| match &mut grads[i] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Binary(kind, a, b) => {
                    let (ga, gb) = binary_backward(*kind, val(*a), val(*b), &g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Affine(a, s) => send(*a, g.scale(*s)),
                Op::Unary(u, a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let data = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&x, &y), &g)| g * u.derivative(x, y))
                        .collect();
                    send(*a, Tensor::new(x.shape(), data)?);
                }
                Op::Atan2(a, b) => {
                    let (y, x) = (val(*a), val(*b));
                    let mut gy = Vec::with_capacity(g.len());
                    let mut gx = Vec::with_capacity(g.len());
                    for ((&yv, &xv), &gv) in y.data().iter().zip(x.data()).zip(g.data()) {
                        let r2 = xv * xv + yv * yv;
                        if r2 == 0.0 {
                            return Err(Error::NonFinite("atan2 backward at the origin".into()));
                        }
                        gy.push(gv * xv / r2);
                        gx.push(-gv * yv / r2);
                    }
                    send(*a, Tensor::new(y.shape(), gy)?);
                    send(*b, Tensor::new(x.shape(), gx)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                    send(*a, Tensor::new(&[m, k], ga)?);
                    send(*b, Tensor::new(&[k, n], gb)?);
                }
                Op::MatMulT(a, b) => {
                    // c = a · bᵀ with a [m,k], b [n,k]
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g.data(), av.data(), &mut gb, n, m, k);
                    send(*a, Tensor::new(&[m, k], ga)?);
                    send(*b, Tensor::new(&[n, k], gb)?);
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                    let mut ga = vec![0.0; bs * m * k];
                    let mut gb = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        gemm_nt(
                            gs,
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            &mut ga[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        gemm_tn(
                            &av.data()[s * m * k..(s + 1) * m * k],
                            gs,
                            &mut gb[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    send(*a, Tensor::new(av.shape(), ga)?);
                    send(*b, Tensor::new(bv.shape(), gb)?);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, g.reshape(&shape)?);
                }
                Op::TransposeLast(a) => send(*a, transpose_last(&g)),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        send(p, slice_axis(&g, *axis, start, len));
                        start += len;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let src = val(*a);
                    let mut full = Tensor::zeros(src.shape());
                    let (outer, dim, inner) = axis_split(src.shape(), *axis);
                    let len = g.shape()[*axis];
                    for o in 0..outer {
                        for j in 0..len {
                            let s = (o * dim + start + j) * inner;
                            let d = (o * len + j) * inner;
                            full.data_mut()[s..s + inner].copy_from_slice(&g.data()[d..d + inner]);
                        }
                    }
                    send(*a, full);
                }
                Op::IndexSelect(a, rows) => {
                    let src = val(*a);
                    let mut full = Tensor::zeros(src.shape());
                    let inner = src.len() / src.shape()[0];
                    for (j, &r) in rows.iter().enumerate() {
                        let dst = &mut full.data_mut()[r * inner..(r + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g.data()[j * inner..(j + 1) * inner]) {
                            *d += s;
                        }
                    }
                    send(*a, full);
                }
                Op::Sum(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, Tensor::full(&shape, g.item()));
                }
                Op::SumAxis(a, axis) => {
                    let src = val(*a);
                    let (outer, dim, inner) = axis_split(src.shape(), *axis);
                    let mut full = Tensor::zeros(src.shape());
                    for o in 0..outer {
                        for j in 0..dim {
                            for i in 0..inner {
                                full.data_mut()[(o * dim + j) * inner + i] = g.data()[o * inner + i];
                            }
                        }
                    }
                    send(*a, full);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / n {
                        let ys = &y.data()[r * n..(r + 1) * n];
                        let gs = &g.data()[r * n..(r + 1) * n];
                        let dotp: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = ys[j] * (gs[j] - dotp);
                        }
                    }
                    send(*a, Tensor::new(y.shape(), gx)?);
                }
                Op::L2Normalize(a, eps) => {
                    let x = val(*a);
                    let n = *x.shape().last().unwrap();
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..x.len() / n {
                        let xs = &x.data()[r * n..(r + 1) * n];
                        let gs = &g.data()[r * n..(r + 1) * n];
                        let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dotp: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gx[r * n + j] = gs[j] / norm - xs[j] * dotp / (norm * norm * norm);
                            }
                        } else {
                            for j in 0..n {
                                gx[r * n + j] = gs[j] / eps;
                            }
                        }
                    }
                    send(*a, Tensor::new(x.shape(), gx)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let gx = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x < *lo || x > *hi { 0.0 } else { g })
                        .collect();
                    send(*a, Tensor::new(x.shape(), gx)?);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    for (&i, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            send(i, gi);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn binary_backward(kind: Binary, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let out = g.shape();
    let oa = broadcast_offsets(a.shape(), out);
    let ob = broadcast_offsets(b.shape(), out);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd) = (a.data(), b.data());
    for (i, &gv) in g.data().iter().enumerate() {
        let (x, y) = (ad[oa[i]], bd[ob[i]]);
        let (dx, dy) = match kind {
            Binary::Add => (gv, gv),
            Binary::Sub => (gv, -gv),
            Binary::Mul => (gv * y, gv * x),
            Binary::Div => (gv / y, -gv * x / (y * y)),
        };
        ga.data_mut()[oa[i]] += dx;
        gb.data_mut()[ob[i]] += dy;
    }
    (ga, gb)
}

/// (product of dims before `axis`, dim at `axis`, product after `axis`)
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swaps the last two axes.
fn transpose_last(t: &Tensor) -> Tensor {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.len() / (m * n).max(1);
    let mut data = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, data).expect("transpose shape")
}

fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, dim, inner) = axis_split(t.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * dim + start) * inner;
        data.extend_from_slice(&t.data()[s..s + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data).expect("slice shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            if a.shape() == b.shape() {
                a.zip_map(&b, f)
            } else {
                let oa = broadcast_offsets(a.shape(), &shape);
                let ob = broadcast_offsets(b.shape(), &shape);
                let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
                Tensor::new(&shape, data)?
            }
        };
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    /// `self * scale + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.value().map(|x| x * scale + shift);
        self.tape.push(out, Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.affine(1.0, c)
    }

    pub fn unary(self, u: Unary) -> Var<'t> {
        let out = self.value().map(|x| u.apply(x));
        self.tape.push(out, Op::Unary(u, self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn log(self) -> Var<'t> {
        self.unary(Unary::Log)
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
    pub fn asin(self) -> Var<'t> {
        self.unary(Unary::Asin)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Unary::Powf(p))
    }

    /// Elementwise `atan2(self, x)`; backward fails at the origin.
    pub fn atan2(self, x: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (y, xv) = (self.value(), x.value());
            if y.shape() != xv.shape() {
                return Err(Error::Shape {
                    op: "atan2",
                    lhs: y.shape().to_vec(),
                    rhs: xv.shape().to_vec(),
                });
            }
            y.zip_map(&xv, f64::atan2)
        };
        Ok(self.tape.push(out, Op::Atan2(self.id, x.id)))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.value().map(|x| x.clamp(lo, hi));
        self.tape.push(out, Op::Clamp(self.id, lo, hi))
    }

    /// `self[m,k] · other[k,n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    /// `self[m,k] · other[n,k]ᵀ`, the layout used for weight matrices.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul_t(&other.value())?;
        Ok(self.tape.push(out, Op::MatMulT(self.id, other.id)))
    }

    /// Batched product `self[b,m,k] · other[b,k,n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::Shape {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut data = vec![0.0; bs * m * n];
            for s in 0..bs {
                gemm_nn(
                    &a.data()[s * m * k..(s + 1) * m * k],
                    &b.data()[s * k * n..(s + 1) * k * n],
                    &mut data[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(&[bs, m, n], data)?
        };
        Ok(self.tape.push(out, Op::Bmm(self.id, other.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Swaps the last two axes (rank ≥ 2).
    pub fn transpose_last(self) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if v.rank() < 2 {
                return Err(Error::invalid(format!("transpose of rank-{} tensor", v.rank())));
            }
            transpose_last(&v)
        };
        Ok(self.tape.push(out, Op::TransposeLast(self.id)))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .tape;
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let first = vals[0].shape().to_vec();
            if axis >= first.len() {
                return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let ok =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(&shape, data)?
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::Concat(ids, axis)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return Err(Error::invalid(format!(
                    "slice {start}..{} on axis {axis} of {:?}",
                    start + len,
                    v.shape()
                )));
            }
            slice_axis(&v, axis, start, len)
        };
        Ok(self.tape.push(out, Op::Slice(self.id, axis, start)))
    }

    /// Gathers rows (entries of axis 0); indices may repeat.
    pub fn index_select(self, rows: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let n = v.shape()[0];
            if let Some(bad) = rows.iter().find(|&&r| r >= n) {
                return Err(Error::invalid(format!("row {bad} out of range for {:?}", v.shape())));
            }
            let inner = v.len() / n.max(1);
            let mut data = Vec::with_capacity(rows.len() * inner);
            for &r in rows {
                data.extend_from_slice(&v.data()[r * inner..(r + 1) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(out, Op::IndexSelect(self.id, rows.to_vec())))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::invalid(format!("sum axis {axis} for {:?}", v.shape())));
            }
            let (outer, dim, inner) = axis_split(v.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..dim {
                    for i in 0..inner {
                        data[o * inner + i] += v.data()[(o * dim + j) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(out, Op::SumAxis(self.id, axis)))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let out = {
            let v = self.value();
            let n = *v.shape().last().unwrap();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            Tensor::new(v.shape(), data).unwrap()
        };
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Rows of the last axis divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(self, eps: f64) -> Var<'t> {
        let out = {
            let v = self.value();
            let n = *v.shape().last().unwrap();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(n) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
            Tensor::new(v.shape(), data).unwrap()
        };
        self.tape.push(out, Op::L2Normalize(self.id, eps))
    }

    /// Euclidean norm of each row of the last axis (last axis dropped).
    pub fn l2norm(self) -> Result<Var<'t>> {
        let r = self.shape().len() - 1;
        self.square().sum_axis(r).map(Var::sqrt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::scalar(0.0));
        let x = tape.param(&store, p);
        let y = x.tanh();
        assert_eq!(y.item(), 0.0);
        let g = tape.backward(y.sum(), store.len()).unwrap();
        assert_eq!(g.get(p).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0; 3]));
        let y = x.softmax();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_derivative_at_zero_is_half() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::scalar(0.0));
        let y = tape.param(&store, p).softplus();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(y.sum(), 1).unwrap();
        assert_eq!(g.get(p).unwrap().item(), 0.5);
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::scalar(3.0));
        let x = tape.param(&store, p);
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum(), 1).unwrap();
        assert_eq!(g.get(p).unwrap().item(), 7.0);
    }

    #[test]
    fn atan2_backward_rejects_origin() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::scalar(0.0));
        let x = tape.param(&store, p);
        let y = x.atan2(x).unwrap();
        assert!(matches!(tape.backward(y.sum(), 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![5., 6.]).unwrap());
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let s = c.slice(1, 2, 1).unwrap();
        assert_eq!(s.value().data(), &[5., 6.]);
    }

    #[test]
    fn broadcast_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
