//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every [`Var`] is a reference-counted node holding its forward value and the op that
//! produced it. Calling [`backward`] walks the graph from a scalar root in reverse
//! topological order and returns the gradients of every parameter that contributed.
//!
//! Two thread-local switches change how nodes are recorded:
//! - [`no_grad`] drops parent links, so intermediates are freed as soon as the caller
//!   lets go of them (inference on large windows);
//! - [`trace_shapes`] skips all kernels and propagates shapes only, which lets the
//!   network's shape assertions run for configurations too large to evaluate.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure, Error, Result};
use crate::substrate::kernels::{self, ConvGeometry, NormStats};
use crate::substrate::param::{ParamId, ParamStore};
use crate::substrate::tensor::{broadcast_shape, reduced_shape, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static TRACING: Cell<bool> = const { Cell::new(false) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub struct TraceGuard {
    prev: bool,
    _no_grad: NoGradGuard,
}

impl Drop for TraceGuard {
    fn drop(&mut self) {
        TRACING.with(|t| t.set(self.prev));
    }
}

/// Switches this thread to shape-only evaluation until the guard is dropped.
pub fn trace_shapes() -> TraceGuard {
    let no_grad = no_grad();
    let prev = TRACING.with(|t| t.replace(true));
    TraceGuard {
        prev,
        _no_grad: no_grad,
    }
}

pub fn is_tracing() -> bool {
    TRACING.with(|t| t.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryKind, Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    SumTo(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Conv2d(Var, Var, ConvGeometry),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats,
    },
    Bilinear(Var),
    MaxPool(Var, Vec<usize>),
    Nearest(Var, usize, usize),
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiable value in the current computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn node(value: Tensor, op: Op, parents_need_grad: bool) -> Var {
    let requires_grad = parents_need_grad && grad_enabled();
    let op = if requires_grad { op } else { Op::Leaf };
    Var(Rc::new(Node {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        value,
        op,
        requires_grad,
    }))
}

/// Runs `kernel` unless the thread is tracing, in which case only `shape` is kept.
fn eval(shape: Vec<usize>, kernel: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
    if is_tracing() {
        Ok(Tensor::phantom(shape))
    } else {
        kernel()
    }
}

fn unary(x: &Var, op: impl FnOnce(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
    let value = if is_tracing() {
        Tensor::phantom(x.shape().to_vec())
    } else {
        x.value().map(f)
    };
    node(value, op(x.clone()), x.requires_grad())
}

impl Var {
    /// A constant input that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        node(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient can be read back from [`Gradients::wrt`].
    pub fn input(value: Tensor) -> Var {
        node(value, Op::Leaf, true)
    }

    /// Binds a stored parameter into the graph.
    pub fn param(store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let value = if is_tracing() {
            Tensor::phantom(p.value.shape().to_vec())
        } else {
            p.value.clone()
        };
        node(value, Op::Param(id), p.trainable)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Detached copy of the forward value.
    pub fn to_tensor(&self) -> Tensor {
        self.0.value.clone()
    }

    fn binary(&self, other: &Var, kind: BinaryKind) -> Result<Var> {
        let shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            )
        })?;
        let value = eval(shape, || {
            self.value().zip_map(other.value(), |a, b| match kind {
                BinaryKind::Add => a + b,
                BinaryKind::Sub => a - b,
                BinaryKind::Mul => a * b,
                BinaryKind::Div => a / b,
            })
        })?;
        Ok(node(
            value,
            Op::Binary(kind, self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Div)
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var {
        unary(self, |x| Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.affine(1.0, c)
    }

    /// `1 − x`.
    pub fn complement(&self) -> Var {
        self.affine(-1.0, 1.0)
    }

    pub fn relu(&self) -> Var {
        unary(self, Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Var {
        unary(self, Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        unary(self, Op::Ln, f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary(self, |x| Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        ensure!(
            axis < self.value().rank(),
            Error::InvalidArgument(format!("softmax axis {axis} out of range"))
        );
        let value = eval(self.shape().to_vec(), || {
            Ok(kernels::softmax_forward(self.value(), axis))
        })?;
        Ok(node(value, Op::Softmax(self.clone(), axis), self.requires_grad()))
    }

    /// Sum over `axes`, keeping them as singleton dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var> {
        let shape = reduced_shape(self.shape(), axes)?;
        self.sum_to(&shape)
    }

    fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let value = eval(shape.to_vec(), || self.value().sum_to_shape(shape))?;
        Ok(node(value, Op::SumTo(self.clone()), self.requires_grad()))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Var {
        self.sum_to(&[1]).expect("any shape reduces to [1]")
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn concat(xs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|v| v.shape()).collect();
        let shape = kernels::concat_shape(&shapes, axis)?;
        let value = eval(shape, || {
            let ts: Vec<&Tensor> = xs.iter().map(|v| v.value()).collect();
            kernels::concat_forward(&ts, axis)
        })?;
        let need = xs.iter().any(|v| v.requires_grad());
        Ok(node(value, Op::Concat(xs.to_vec(), axis), need))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        ensure!(
            axis < self.value().rank() && len > 0 && start + len <= self.shape()[axis],
            Error::shape(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, self.shape())
            )
        );
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let value = eval(shape, || kernels::narrow_forward(self.value(), axis, start, len))?;
        Ok(node(value, Op::Narrow(self.clone(), axis, start), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == self.value().numel(),
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape()))
        );
        let value = eval(shape.to_vec(), || self.value().clone().reshape(shape))?;
        Ok(node(value, Op::Reshape(self.clone()), self.requires_grad()))
    }

    pub fn conv2d(&self, weight: &Var, geom: ConvGeometry) -> Result<Var> {
        let shape = kernels::conv2d_out_shape(self.shape(), weight.shape(), geom)?;
        let value = eval(shape, || kernels::conv2d_forward(self.value(), weight.value(), geom))?;
        Ok(node(
            value,
            Op::Conv2d(self.clone(), weight.clone(), geom),
            self.requires_grad() || weight.requires_grad(),
        ))
    }

    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Result<Var> {
        kernels::group_norm_check(self.shape(), gamma.shape(), beta.shape(), groups)?;
        let (value, stats) = if is_tracing() {
            (Tensor::phantom(self.shape().to_vec()), NormStats::default())
        } else {
            kernels::group_norm_forward(self.value(), gamma.value(), beta.value(), groups, eps)?
        };
        let need = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(node(
            value,
            Op::GroupNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                stats,
            },
            need,
        ))
    }

    /// Bilinear ×2 upsampling with half-pixel centres.
    pub fn upsample_bilinear2x(&self) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(), "upsample_bilinear2x")?;
        let value = eval(vec![b, c, 2 * h, 2 * w], || {
            kernels::bilinear_resize_forward(self.value(), 2 * h, 2 * w)
        })?;
        Ok(node(value, Op::Bilinear(self.clone()), self.requires_grad()))
    }

    /// Non-overlapping max pooling with a `kh×kw` window.
    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(), "max_pool2d")?;
        ensure!(
            kh > 0 && kw > 0 && h % kh == 0 && w % kw == 0,
            Error::shape("max_pool2d", format!("window {kh}×{kw} does not tile {h}×{w}"))
        );
        let (value, arg) = if is_tracing() {
            (Tensor::phantom(vec![b, c, h / kh, w / kw]), Vec::new())
        } else {
            kernels::max_pool_forward(self.value(), kh, kw)?
        };
        Ok(node(value, Op::MaxPool(self.clone(), arg), self.requires_grad()))
    }

    pub fn upsample_nearest(&self, fh: usize, fw: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(), "upsample_nearest")?;
        let value = eval(vec![b, c, h * fh, w * fw], || {
            kernels::upsample_nearest_forward(self.value(), fh, fw)
        })?;
        Ok(node(value, Op::Nearest(self.clone(), fh, fw), self.requires_grad()))
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, format!("expected B×C×H×W, got {shape:?}"))),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient of an [`Var::input`] leaf, if it was reached.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.inputs.get(&v.id())
    }
}

fn accumulate(map: &mut HashMap<u64, Tensor>, id: u64, g: Tensor) {
    match map.get_mut(&id) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(id, g);
        }
    }
}

fn parents(op: &Op) -> Vec<&Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Binary(_, a, b) | Op::Conv2d(a, b, _) => vec![a, b],
        Op::Affine(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Clamp(x, _, _)
        | Op::Softmax(x, _)
        | Op::SumTo(x)
        | Op::Narrow(x, _, _)
        | Op::Reshape(x)
        | Op::Bilinear(x)
        | Op::MaxPool(x, _)
        | Op::Nearest(x, _, _) => vec![x],
        Op::Concat(xs, _) => xs.iter().collect(),
        Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
    }
}

/// Nodes reachable from `root` that need a gradient, parents before children.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in parents(&v.0.op) {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Backpropagates from a one-element `root`.
pub fn backward(root: &Var) -> Result<Gradients> {
    ensure!(
        root.value().numel() == 1,
        Error::shape("backward", format!("root must be a scalar, got {:?}", root.shape()))
    );
    ensure!(
        !is_tracing(),
        Error::InvalidArgument("cannot backpropagate a shape trace".into())
    );
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return Ok(out);
    }
    let order = topo_order(root);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::ones(root.shape()));
    for v in order.iter().rev() {
        let Some(g) = grads.remove(&v.id()) else {
            continue;
        };
        match &v.0.op {
            Op::Param(id) => {
                match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(*id, g);
                    }
                }
            }
            Op::Leaf => {
                out.inputs.insert(v.id(), g);
            }
            op => {
                for (p, pg) in local_grads(op, &v.0.value, &g)? {
                    if p.requires_grad() {
                        accumulate(&mut grads, p.id(), pg);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn local_grads<'a>(op: &'a Op, y: &Tensor, g: &Tensor) -> Result<Vec<(&'a Var, Tensor)>> {
    Ok(match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Binary(kind, a, b) => {
            let (av, bv) = (a.value(), b.value());
            let mut res = Vec::with_capacity(2);
            if a.requires_grad() {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => g.zip_map(bv, |g, b| g * b)?,
                    BinaryKind::Div => g.zip_map(bv, |g, b| g / b)?,
                };
                res.push((a, ga.sum_to_shape(av.shape())?));
            }
            if b.requires_grad() {
                let gb = match kind {
                    BinaryKind::Add => g.clone(),
                    BinaryKind::Sub => g.map(|v| -v),
                    BinaryKind::Mul => g.zip_map(av, |g, a| g * a)?,
                    // d(a/b)/db = −y/b
                    BinaryKind::Div => g.zip_map(y, |g, y| g * y)?.zip_map(bv, |t, b| -t / b)?,
                };
                res.push((b, gb.sum_to_shape(bv.shape())?));
            }
            res
        }
        Op::Affine(x, s) => vec![(x, g.map(|v| v * s))],
        Op::Relu(x) => vec![(x, g.zip_map(x.value(), |g, v| if v > 0.0 { g } else { 0.0 })?)],
        Op::Sigmoid(x) => vec![(x, g.zip_map(y, |g, s| g * s * (1.0 - s))?)],
        Op::Exp(x) => vec![(x, g.zip_map(y, |g, e| g * e)?)],
        Op::Ln(x) => vec![(x, g.zip_map(x.value(), |g, v| g / v)?)],
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![(
                x,
                g.zip_map(x.value(), |g, v| if v >= lo && v <= hi { g } else { 0.0 })?,
            )]
        }
        Op::Softmax(x, axis) => vec![(x, kernels::softmax_backward(y, g, *axis))],
        Op::SumTo(x) => {
            let expanded = Tensor::zeros(x.shape()).zip_map(g, |_, g| g)?;
            vec![(x, expanded)]
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            let mut res = Vec::with_capacity(xs.len());
            for x in xs {
                let n = x.shape()[*axis];
                if x.requires_grad() {
                    res.push((x, kernels::narrow_forward(g, *axis, start, n)?));
                }
                start += n;
            }
            res
        }
        Op::Narrow(x, axis, start) => {
            vec![(x, kernels::narrow_backward(g, x.shape(), *axis, *start))]
        }
        Op::Reshape(x) => vec![(x, g.clone().reshape(x.shape())?)],
        Op::Conv2d(x, w, geom) => {
            let (gx, gw) = kernels::conv2d_backward(
                x.value(),
                w.value(),
                g,
                *geom,
                x.requires_grad(),
                w.requires_grad(),
            )?;
            let mut res = Vec::with_capacity(2);
            if let Some(gx) = gx {
                res.push((x, gx));
            }
            if let Some(gw) = gw {
                res.push((w, gw));
            }
            res
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let (gx, gg, gb) =
                kernels::group_norm_backward(x.value(), gamma.value(), g, *groups, stats)?;
            vec![(x, gx), (gamma, gg), (beta, gb)]
        }
        Op::Bilinear(x) => vec![(x, kernels::bilinear_resize_backward(g, x.shape())?)],
        Op::MaxPool(x, arg) => {
            let mut gx = Tensor::zeros(x.shape());
            let d = gx.data_mut();
            for (o, &at) in arg.iter().enumerate() {
                d[at] += g.data()[o];
            }
            vec![(x, gx)]
        }
        Op::Nearest(x, fh, fw) => vec![(x, kernels::upsample_nearest_backward(g, x.shape(), *fh, *fw)?)],
    })
}
