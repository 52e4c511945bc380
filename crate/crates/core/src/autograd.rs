//! Tape-based reverse-mode differentiation over the network's op set.
//!
//! A [`Tape`] records every forward op together with whatever the adjoint
//! needs. [`Tape::backward`] walks the records in reverse and returns the
//! gradient of a scalar with respect to every node that requires one.

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, Window};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Op family, used to name ops in reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MulBroadcast,
    Scale,
    Relu,
    Sigmoid,
    Reshape,
    Permute,
    Conv2d,
    ConvTranspose2d,
    Conv3d,
    MaxPool,
    AvgPoolSpatial,
    AvgPoolChannel,
    Mean,
    Bilinear,
    Softmax,
    Linear,
    TemporalShift,
    CrossEntropy,
    Mse,
    Sum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MulBroadcast => "mul_broadcast",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Conv3d => "conv3d",
            OpKind::MaxPool => "max_pool",
            OpKind::AvgPoolSpatial => "avg_pool_spatial",
            OpKind::AvgPoolChannel => "avg_pool_channel",
            OpKind::Mean => "mean",
            OpKind::Bilinear => "bilinear_resize",
            OpKind::Softmax => "softmax",
            OpKind::Linear => "fully_connected",
            OpKind::TemporalShift => "temporal_shift",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 24] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::MulBroadcast,
    OpKind::Scale,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Conv2d,
    OpKind::ConvTranspose2d,
    OpKind::Conv3d,
    OpKind::MaxPool,
    OpKind::AvgPoolSpatial,
    OpKind::AvgPoolChannel,
    OpKind::Mean,
    OpKind::Bilinear,
    OpKind::Softmax,
    OpKind::Linear,
    OpKind::TemporalShift,
    OpKind::CrossEntropy,
    OpKind::Mse,
    OpKind::Sum,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel range `[lo, hi)` moved by `offset` frames along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelShift {
    pub lo: usize,
    pub hi: usize,
    pub offset: isize,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulBroadcast { a: usize, b: usize, plan: Broadcast },
    Scale(usize, F),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Permute { a: usize, axes: Vec<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, g: Window, m: usize, o: usize },
    ConvT2d { x: usize, w: usize, b: Option<usize>, g: Window, m: usize, cin: usize },
    Conv3d { x: usize, w: usize, b: usize, dims: [usize; 4] },
    MaxPool { x: usize, arg: Vec<usize> },
    MeanRange { a: usize, kind: OpKind, outer: usize, red: usize, inner: usize },
    Bilinear { a: usize, planes: usize, hw: [usize; 4] },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Linear { x: usize, w: usize, b: Option<usize>, m: usize, k: usize, o: usize },
    Shift { a: usize, dims: [usize; 5], moves: Vec<ChannelShift> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<F> },
    Mse(usize, usize),
    Sum(usize),
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MulBroadcast { .. } => OpKind::MulBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvT2d { .. } => OpKind::ConvTranspose2d,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::MeanRange { kind, .. } => *kind,
            Op::Bilinear { .. } => OpKind::Bilinear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Linear { .. } => OpKind::Linear,
            Op::Shift { .. } => OpKind::TemporalShift,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse(..) => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<F: Scalar = f32> {
    nodes: RefCell<Vec<Node<F>>>,
    fault: Cell<Option<OpKind>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupt the adjoint of one op family. Negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![F::one()]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let g = if fault == Some(node.op.kind()) {
                g.into_iter().map(|v| v * F::of(1.5)).collect()
            } else {
                g
            };
            let need = |i: usize| nodes[i].requires_grad;
            let mut emit = |i: usize, d: Vec<F>| accumulate(&mut grads, i, d);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        emit(*b, g.clone());
                    }
                    if need(*a) {
                        emit(*a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        emit(*b, g.iter().map(|&v| -v).collect());
                    }
                    if need(*a) {
                        emit(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if need(*a) {
                        emit(*a, g.iter().zip(vb).map(|(&g, &v)| g * v).collect());
                    }
                    if need(*b) {
                        emit(*b, g.iter().zip(va).map(|(&g, &v)| g * v).collect());
                    }
                }
                Op::MulBroadcast { a, b, plan } => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if need(*a) {
                        let mut da = vec![F::zero(); va.len()];
                        plan.for_each(|i, j| da[i] = g[i] * vb[j]);
                        emit(*a, da);
                    }
                    if need(*b) {
                        let mut db = vec![F::zero(); vb.len()];
                        plan.for_each(|i, j| db[j] += g[i] * va[i]);
                        emit(*b, db);
                    }
                }
                Op::Scale(a, s) => emit(*a, g.iter().map(|&v| v * *s).collect()),
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    emit(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    emit(*a, g.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect());
                }
                Op::Reshape(a) => emit(*a, g),
                Op::Permute { a, axes } => {
                    let src_shape = nodes[*a].value.shape();
                    let inverse = inverse_permutation(axes);
                    let out_shape: Vec<usize> = axes.iter().map(|&ax| src_shape[ax]).collect();
                    emit(*a, permute_data(&g, &out_shape, &inverse));
                }
                Op::Conv2d { x, w, b, g: geom, m, o } => {
                    let grads_c = kernels::conv2d_backward(
                        nodes[*x].value.data(),
                        *m,
                        geom,
                        nodes[*w].value.data(),
                        *o,
                        &g,
                        need(*x),
                    );
                    if let Some(dx) = grads_c.dx {
                        emit(*x, dx);
                    }
                    if need(*w) {
                        emit(*w, grads_c.dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit(b, grads_c.db);
                    }
                }
                Op::ConvT2d { x, w, b, g: geom, m, cin } => {
                    let grads_c = kernels::conv_transpose2d_backward(
                        nodes[*x].value.data(),
                        *m,
                        *cin,
                        geom,
                        nodes[*w].value.data(),
                        &g,
                        need(*x),
                    );
                    if let Some(dx) = grads_c.dx {
                        emit(*x, dx);
                    }
                    if need(*w) {
                        emit(*w, grads_c.dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit(b, grads_c.db);
                    }
                }
                Op::Conv3d { x, w, b, dims } => {
                    let (dx, dw, db) = kernels::conv3d_backward(
                        nodes[*x].value.data(),
                        *dims,
                        nodes[*w].value.data(),
                        &g,
                        need(*x),
                    );
                    if let Some(dx) = dx {
                        emit(*x, dx);
                    }
                    if need(*w) {
                        emit(*w, dw);
                    }
                    if need(*b) {
                        emit(*b, vec![db]);
                    }
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = vec![F::zero(); nodes[*x].value.numel()];
                    for (&gv, &i) in g.iter().zip(arg) {
                        dx[i] += gv;
                    }
                    emit(*x, dx);
                }
                Op::MeanRange {
                    a,
                    outer,
                    red,
                    inner,
                    ..
                } => {
                    let scale = F::one() / F::of(*red as f64);
                    let mut dx = Vec::with_capacity(outer * red * inner);
                    for o in 0..*outer {
                        let row = &g[o * inner..][..*inner];
                        for _ in 0..*red {
                            dx.extend(row.iter().map(|&v| v * scale));
                        }
                    }
                    emit(*a, dx);
                }
                Op::Bilinear { a, planes, hw } => {
                    let [h, w, oh, ow] = *hw;
                    emit(*a, kernels::bilinear_backward(&g, *planes, h, w, oh, ow));
                }
                Op::Softmax {
                    a,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let mut dx = vec![F::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: F = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..*len {
                                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                    emit(*a, dx);
                }
                Op::Linear { x, w, b, m, k, o } => {
                    if need(*x) {
                        let mut dx = vec![F::zero(); m * k];
                        kernels::gemm(false, false, *m, *k, *o, F::one(), &g, nodes[*w].value.data(), F::zero(), &mut dx);
                        emit(*x, dx);
                    }
                    if need(*w) {
                        let mut dw = vec![F::zero(); o * k];
                        kernels::gemm(true, false, *o, *k, *m, F::one(), &g, nodes[*x].value.data(), F::zero(), &mut dw);
                        emit(*w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        let mut db = vec![F::zero(); *o];
                        for row in g.chunks_exact(*o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        emit(b, db);
                    }
                }
                Op::Shift { a, dims, moves } => {
                    let reversed: Vec<ChannelShift> = moves
                        .iter()
                        .map(|s| ChannelShift {
                            offset: -s.offset,
                            ..*s
                        })
                        .collect();
                    emit(*a, shift_time_data(&g, *dims, &reversed));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let cls = probs.len() / n;
                    let scale = g[0] / F::of(n as f64);
                    let mut dx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * cls + l] -= scale;
                    }
                    emit(*logits, dx);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let scale = F::of(2.0) * g[0] / F::of(va.len() as f64);
                    let d: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * scale).collect();
                    if need(*b) {
                        emit(*b, d.iter().map(|&v| -v).collect());
                    }
                    if need(*a) {
                        emit(*a, d);
                    }
                }
                Op::Sum(a) => emit(*a, vec![g[0]; nodes[*a].value.numel()]),
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], id: usize, d: Vec<F>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Tape::backward`]: gradients for leaf inputs.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads
            .get(v.id)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Gradient of a leaf, zeros when unreached.
    pub fn wrt(&self, v: Var<'_, F>) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute `data` laid out as `shape` so that output axis `i` is input axis `axes[i]`.
fn permute_data<F: Scalar>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Broadcast of `b` over `full`, as merged axes `(extent, stride in b)`
/// with stride 0 on broadcast axes.
#[derive(Clone, Debug)]
struct Broadcast {
    axes: Vec<(usize, usize)>,
}

impl Broadcast {
    fn new(full: &[usize], b: &[usize]) -> Self {
        let mut axes: Vec<(usize, usize)> = Vec::new();
        for ((&f, &d), &s) in full.iter().zip(b).zip(&strides(b)) {
            if f == 1 {
                continue;
            }
            let stride = if d == 1 { 0 } else { s };
            match axes.last_mut() {
                Some((pe, ps)) if *ps == stride * f => {
                    *pe *= f;
                    *ps = stride;
                }
                _ => axes.push((f, stride)),
            }
        }
        Broadcast { axes }
    }

    /// `f(i, j)` for every flat index `i` of the full shape and its index `j` in `b`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (inner, step) = self.axes.last().copied().unwrap_or((1, 0));
        let outer = &self.axes[..self.axes.len().saturating_sub(1)];
        let mut idx = vec![0usize; outer.len()];
        let (mut i, mut base) = (0, 0);
        for _ in 0..outer.iter().map(|a| a.0).product::<usize>() {
            for k in 0..inner {
                f(i + k, base + k * step);
            }
            i += inner;
            for ax in (0..outer.len()).rev() {
                idx[ax] += 1;
                base += outer[ax].1;
                if idx[ax] < outer[ax].0 {
                    break;
                }
                base -= outer[ax].1 * outer[ax].0;
                idx[ax] = 0;
            }
        }
    }
}

/// Move channel ranges along the time axis of `(n, t, c, h, w)` data with zero fill.
fn shift_time_data<F: Scalar>(x: &[F], dims: [usize; 5], moves: &[ChannelShift]) -> Vec<F> {
    let [n, t, c, h, w] = dims;
    let plane = h * w;
    let mut y = x.to_vec();
    for s in moves {
        for b in 0..n {
            for ti in 0..t {
                let src = ti as isize - s.offset;
                for ch in s.lo..s.hi {
                    let dst = ((b * t + ti) * c + ch) * plane;
                    if src >= 0 && (src as usize) < t {
                        let from = ((b * t + src as usize) * c + ch) * plane;
                        y[dst..dst + plane].copy_from_slice(&x[from..from + plane]);
                    } else {
                        y[dst..dst + plane].fill(F::zero());
                    }
                }
            }
        }
    }
    y
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// A constant on the same tape.
    pub fn tape_constant(&self, value: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(value)
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip(&self, other: &Var<'t, F>, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (a, b) = (self.value(), other.value());
        same_shape(op, a.shape(), b.shape())?;
        Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise product where `other` may have extent 1 on any axis.
    pub fn mul_broadcast(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let compatible = a.rank() == b.rank()
            && a.shape().iter().zip(b.shape()).all(|(&x, &y)| y == x || y == 1);
        if !compatible {
            return Err(Error::shape(
                "mul_broadcast",
                format!("cannot broadcast {:?} over {:?}", b.shape(), a.shape()),
            ));
        }
        let plan = Broadcast::new(a.shape(), b.shape());
        let (ad, bd) = (a.data(), b.data());
        let mut data = vec![F::zero(); ad.len()];
        plan.for_each(|i, j| data[i] = ad[i] * bd[j]);
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(
            other,
            value,
            Op::MulBroadcast {
                a: self.id,
                b: other.id,
                plan,
            },
        ))
    }

    pub fn scale(&self, s: F) -> Var<'t, F> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn relu(&self) -> Var<'t, F> {
        let v = self.value().map(|x| if x > F::zero() { x } else { F::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Zero-copy view under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", x.rank()),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.dim(a)).collect();
        let data = permute_data(x.data(), x.shape(), axes);
        Ok(self.unary(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// 2D cross-correlation. `self: (M, C, H, W)`, `w: (O, C, kh, kw)`, `b: (O)`.
    pub fn conv2d(&self, w: &Var<'t, F>, b: Option<&Var<'t, F>>, spec: &ConvSpec) -> Result<Var<'t, F>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("conv2d", x.shape(), 4)?;
        let [m, c, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        check_conv_weight("conv2d", wv.shape(), [spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1]])?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("axis C: input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        check_bias("conv2d", b, spec.out_channels)?;
        let (oh, ow) = (spec.output_extent(h, 0)?, spec.output_extent(wd, 1)?);
        let g = Window::new(spec, c, h, wd, oh, ow);
        let bias = b.map(|b| b.value());
        let y = kernels::conv2d_forward(x.data(), m, &g, wv.data(), spec.out_channels, bias.as_ref().map(|t| t.data()));
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, spec.out_channels, oh, ow], y),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                g,
                m,
                o: spec.out_channels,
            },
            rg,
        ))
    }

    /// Transposed 2D convolution. `w: (C_in, C_out, kh, kw)`.
    pub fn conv_transpose2d(&self, w: &Var<'t, F>, b: Option<&Var<'t, F>>, spec: &ConvSpec) -> Result<Var<'t, F>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("conv_transpose2d", x.shape(), 4)?;
        let [m, c, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        check_conv_weight(
            "conv_transpose2d",
            wv.shape(),
            [spec.in_channels, spec.out_channels, spec.kernel[0], spec.kernel[1]],
        )?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("axis C: input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        check_bias("conv_transpose2d", b, spec.out_channels)?;
        let (oh, ow) = (spec.transpose_output_extent(h, 0)?, spec.transpose_output_extent(wd, 1)?);
        let g = Window::new(spec, spec.out_channels, oh, ow, h, wd);
        let bias = b.map(|b| b.value());
        let y = kernels::conv_transpose2d_forward(x.data(), m, c, &g, wv.data(), bias.as_ref().map(|t| t.data()));
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, spec.out_channels, oh, ow], y),
            Op::ConvT2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                g,
                m,
                cin: c,
            },
            rg,
        ))
    }

    /// Temporal convolution over `(N, C, T)` with an odd kernel `w: (O, C, k)`
    /// and same padding.
    pub fn conv1d_temporal(&self, w: &Var<'t, F>, b: Option<&Var<'t, F>>) -> Result<Var<'t, F>> {
        let x = self.value();
        expect_rank("conv1d_temporal", x.shape(), 3)?;
        let wv = w.value();
        expect_rank("conv1d_temporal", wv.shape(), 3)?;
        let [n, c, t] = [x.dim(0), x.dim(1), x.dim(2)];
        if t < 1 {
            return Err(Error::shape("conv1d_temporal", "axis T must be at least 1"));
        }
        let (o, k) = (wv.dim(0), wv.dim(2));
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d_temporal kernel {k} must be odd")));
        }
        let spec = ConvSpec {
            in_channels: c,
            out_channels: o,
            kernel: [1, k],
            stride: [1, 1],
            padding: [0, k / 2],
        };
        let w4 = w.reshape(&[o, wv.dim(1), 1, k])?;
        self.reshape(&[n, c, 1, t])?
            .conv2d(&w4, b, &spec)?
            .reshape(&[n, o, t])
    }

    /// Single-channel 3x3x3 convolution with unit padding. `self: (N, 1, T, H, W)`,
    /// `w: (1, 1, 3, 3, 3)`, `b: (1)`.
    pub fn conv3d(&self, w: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
        let x = self.value();
        expect_rank("conv3d", x.shape(), 5)?;
        if x.dim(1) != 1 {
            return Err(Error::shape("conv3d", format!("axis C: expected 1 channel, got {}", x.dim(1))));
        }
        if w.shape() != [1, 1, 3, 3, 3] {
            return Err(Error::shape("conv3d", format!("weight must be (1,1,3,3,3), got {:?}", w.shape())));
        }
        check_bias("conv3d", Some(b), 1)?;
        let dims = [x.dim(0), x.dim(2), x.dim(3), x.dim(4)];
        let y = kernels::conv3d_forward(x.data(), dims, w.value().data(), b.value().item());
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Conv3d {
                x: self.id,
                w: w.id,
                b: b.id,
                dims,
            },
            rg,
        ))
    }

    /// 2x2 stride-2 max pooling over the last two axes of `(M, C, H, W)`.
    pub fn max_pool2x2(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        expect_rank("max_pool", x.shape(), 4)?;
        let (h, w) = (x.dim(2), x.dim(3));
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool", format!("spatial extent {h}x{w} below 2x2")));
        }
        let (y, arg) = kernels::max_pool2x2(x.data(), x.dim(0) * x.dim(1), h, w);
        let shape = vec![x.dim(0), x.dim(1), h / 2, w / 2];
        Ok(self.unary(Tensor::from_parts(shape, y), Op::MaxPool { x: self.id, arg }))
    }

    fn mean_range(&self, lo: usize, hi: usize, kind: OpKind, keep: bool) -> Result<Var<'t, F>> {
        let x = self.value();
        let s = x.shape();
        if hi > s.len() || lo >= hi {
            return Err(Error::shape(kind.name(), format!("axes {lo}..{hi} out of range for {s:?}")));
        }
        let outer: usize = s[..lo].iter().product();
        let red: usize = s[lo..hi].iter().product();
        let inner: usize = s[hi..].iter().product();
        if red == 0 {
            return Err(Error::shape(kind.name(), "reduced extent is zero"));
        }
        let inv = F::one() / F::of(red as f64);
        let d = x.data();
        let mut y = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..red {
                let src = &d[(o * red + r) * inner..][..inner];
                for (acc, &v) in y[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        y.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape: Vec<usize> = s[..lo].to_vec();
        if keep {
            shape.extend(std::iter::repeat_n(1, hi - lo));
        }
        shape.extend_from_slice(&s[hi..]);
        Ok(self.unary(
            Tensor::from_parts(shape, y),
            Op::MeanRange {
                a: self.id,
                kind,
                outer,
                red,
                inner,
            },
        ))
    }

    /// Mean over the last two (spatial) axes, kept as extent 1.
    pub fn avg_pool_spatial(&self) -> Result<Var<'t, F>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("avg_pool_spatial", "need at least two axes"));
        }
        self.mean_range(r - 2, r, OpKind::AvgPoolSpatial, true)
    }

    /// Mean over the channel axis of `(N, T, C, H, W)`, kept as extent 1.
    pub fn avg_pool_channel(&self) -> Result<Var<'t, F>> {
        expect_rank("avg_pool_channel", &self.shape(), 5)?;
        self.mean_range(2, 3, OpKind::AvgPoolChannel, true)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, F>> {
        self.mean_range(axis, axis + 1, OpKind::Mean, false)
    }

    /// Bilinear resampling of the last two axes (half-pixel convention).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(Error::shape("bilinear_resize", "need at least two axes"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::config(format!("bilinear_resize target {out_h}x{out_w} has a zero extent")));
        }
        let (h, w) = (x.dim(r - 2), x.dim(r - 1));
        if h == 0 || w == 0 {
            return Err(Error::shape("bilinear_resize", "empty source image"));
        }
        let planes = x.numel() / (h * w);
        let y = kernels::bilinear_forward(x.data(), planes, h, w, out_h, out_w);
        let mut shape = x.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.unary(
            Tensor::from_parts(shape, y),
            Op::Bilinear {
                a: self.id,
                planes,
                hw: [h, w, out_h, out_w],
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.dim(axis);
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let d = x.data();
        let mut y = vec![F::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..len {
                    let e = (d[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] = y[at(k)] / z;
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// `self: (M, K)`, `w: (O, K)`, `b: (O)` -> `(M, O)`.
    pub fn fully_connected(&self, w: &Var<'t, F>, b: Option<&Var<'t, F>>) -> Result<Var<'t, F>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("fully_connected", x.shape(), 2)?;
        expect_rank("fully_connected", wv.shape(), 2)?;
        let (m, k, o) = (x.dim(0), x.dim(1), wv.dim(0));
        if wv.dim(1) != k {
            return Err(Error::shape(
                "fully_connected",
                format!("axis K: input has {k} features, weight expects {}", wv.dim(1)),
            ));
        }
        check_bias("fully_connected", b, o)?;
        let mut y = vec![F::zero(); m * o];
        kernels::gemm(false, true, m, o, k, F::one(), x.data(), wv.data(), F::zero(), &mut y);
        if let Some(b) = b {
            let bv = b.value();
            for row in y.chunks_exact_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, o], y),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                m,
                k,
                o,
            },
            rg,
        ))
    }

    /// Move channel ranges of `(N, T, C, H, W)` along time with zero fill.
    /// A positive offset moves frame `t` to `t + offset`.
    pub fn shift_time(&self, moves: &[ChannelShift]) -> Result<Var<'t, F>> {
        let x = self.value();
        expect_rank("temporal_shift", x.shape(), 5)?;
        let dims = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
        for s in moves {
            if s.lo > s.hi || s.hi > dims[2] {
                return Err(Error::shape(
                    "temporal_shift",
                    format!("channel range {}..{} exceeds C={}", s.lo, s.hi, dims[2]),
                ));
            }
        }
        let y = shift_time_data(x.data(), dims, moves);
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Shift {
                a: self.id,
                dims,
                moves: moves.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `(N, CLS)` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        expect_rank("cross_entropy", x.shape(), 2)?;
        let (n, cls) = (x.dim(0), x.dim(1));
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("axis N: {n} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cls) {
            return Err(Error::config(format!("label {bad} out of range for {cls} classes")));
        }
        let mut probs = Vec::with_capacity(n * cls);
        let mut total = 0.0f64;
        for (row, &l) in x.data().chunks_exact(cls).zip(labels) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += (lse - row[l]).as_f64();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = F::of(total / n as f64);
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, target: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), target.value());
        same_shape("mse", a.shape(), b.shape())?;
        let n = a.numel().max(1);
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        Ok(self.binary(target, Tensor::scalar(F::of(s / n as f64)), Op::Mse(self.id, target.id)))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn check_conv_weight(op: &'static str, got: &[usize], want: [usize; 4]) -> Result<()> {
    if got.len() < 4 {
        return Err(Error::shape(op, format!("weight must be rank 4, got {got:?}")));
    }
    const AXES: [&str; 4] = ["weight axis 0", "weight axis 1", "kernel axis H", "kernel axis W"];
    for i in 0..4 {
        if got[i] != want[i] {
            return Err(Error::shape(op, format!("{}: expected {}, got {}", AXES[i], want[i], got[i])));
        }
    }
    Ok(())
}

fn check_bias<F: Scalar>(op: &'static str, b: Option<&Var<'_, F>>, n: usize) -> Result<()> {
    if let Some(b) = b {
        let s = b.shape();
        if s != [n] {
            return Err(Error::shape(op, format!("bias must be ({n}), got {s:?}")));
        }
    }
    Ok(())
}
