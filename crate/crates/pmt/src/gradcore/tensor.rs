//! The tensor type, its elementwise/reduction/shape ops, and the reverse-mode
//! backward pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;
use thiserror::Error;

use super::{cast, TensorResult};

/// Scalar element trait: `f32` for training, `f64` for double-precision tests.
pub trait Scalar: Float + fmt::Debug + fmt::Display + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Errors produced by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Ops evaluated inside the closure produce plain tensors with no parents, so
/// frozen-peer and teacher forwards build no graph and receive no gradients.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// How a non-leaf tensor was produced; drives the backward pass.
pub(crate) enum BackOp<T: Scalar> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    LnClamped { min: T },
    PowScalar { exponent: T },
    Sigmoid,
    Relu,
    AddScalar,
    SubScalar,
    RsubScalar,
    MulScalar { s: T },
    DivScalar { s: T },
    SumAll,
    MeanAll,
    Concat { dim: usize },
    Narrow { dim: usize, start: usize },
    Conv2d { stride: usize, padding: usize },
    MaxPool2x { argmax: Vec<u32> },
    Upsample2x,
}

pub(crate) struct Node<T: Scalar> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor<T>>,
    pub back: Option<BackOp<T>>,
}

/// A dense n-dimensional array with optional gradient tracking.
///
/// Cloning is cheap (a reference-count bump); the underlying buffer is shared.
pub struct Tensor<T: Scalar = f32>(pub(crate) Rc<RefCell<Node<T>>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            n.shape, n.requires_grad
        )
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> TensorResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    // ── constructors ────────────────────────────────────────────────

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArg {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![T::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub(crate) fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            back: None,
        })))
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        back: BackOp<T>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            grad: None,
            requires_grad: record,
            parents: if record { parents } else { Vec::new() },
            back: if record { Some(back) } else { None },
        })))
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.borrow_mut().requires_grad = on;
    }

    /// Copies the values out.
    pub fn to_vec(&self) -> Vec<T> {
        self.0.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> TensorResult<T> {
        let n = self.0.borrow();
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "item",
                shape: n.shape.clone(),
            })
        }
    }

    /// Copies the accumulated gradient out, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Runs `f` over the raw data buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.0.borrow().data)
    }

    /// Overwrites the raw data buffer in place. Used by the optimizer and the
    /// EMA update; never records a graph edge.
    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.0.borrow_mut().data)
    }

    /// A gradient-free copy of this tensor's values.
    pub fn detach(&self) -> Self {
        let n = self.0.borrow();
        Self::leaf(n.data.clone(), n.shape.clone(), false)
    }

    // ── elementwise binary ops (exact-shape) ────────────────────────

    fn binary(
        &self,
        rhs: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        back: BackOp<T>,
    ) -> TensorResult<Self> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            });
        }
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let data: Vec<T> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        check_finite(op, &data)?;
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Self::from_op(data, shape, vec![self.clone(), rhs.clone()], back))
    }

    pub fn add(&self, rhs: &Self) -> TensorResult<Self> {
        self.binary(rhs, "add", |x, y| x + y, BackOp::Add)
    }

    pub fn sub(&self, rhs: &Self) -> TensorResult<Self> {
        self.binary(rhs, "sub", |x, y| x - y, BackOp::Sub)
    }

    pub fn mul(&self, rhs: &Self) -> TensorResult<Self> {
        self.binary(rhs, "mul", |x, y| x * y, BackOp::Mul)
    }

    pub fn div(&self, rhs: &Self) -> TensorResult<Self> {
        self.binary(rhs, "div", |x, y| x / y, BackOp::Div)
    }

    // ── elementwise unary ops ───────────────────────────────────────

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        back: BackOp<T>,
    ) -> TensorResult<Self> {
        let a = self.0.borrow();
        let data: Vec<T> = a.data.iter().map(|&x| f(x)).collect();
        check_finite(op, &data)?;
        let shape = a.shape.clone();
        drop(a);
        Ok(Self::from_op(data, shape, vec![self.clone()], back))
    }

    pub fn neg(&self) -> TensorResult<Self> {
        self.unary("neg", |x| -x, BackOp::Neg)
    }

    pub fn exp(&self) -> TensorResult<Self> {
        self.unary("exp", |x| x.exp(), BackOp::Exp)
    }

    /// Natural log with the argument clamped below at `min`.
    pub fn ln_clamped(&self, min: T) -> TensorResult<Self> {
        self.unary("ln_clamped", |x| x.max(min).ln(), BackOp::LnClamped { min })
    }

    /// Elementwise `x^exponent` for a scalar exponent.
    pub fn powf(&self, exponent: T) -> TensorResult<Self> {
        self.unary(
            "powf",
            |x| x.powf(exponent),
            BackOp::PowScalar { exponent },
        )
    }

    pub fn sigmoid(&self) -> TensorResult<Self> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            BackOp::Sigmoid,
        )
    }

    pub fn relu(&self) -> TensorResult<Self> {
        self.unary("relu", |x| x.max(T::zero()), BackOp::Relu)
    }

    pub fn add_scalar(&self, s: T) -> TensorResult<Self> {
        self.unary("add_scalar", |x| x + s, BackOp::AddScalar)
    }

    pub fn sub_scalar(&self, s: T) -> TensorResult<Self> {
        self.unary("sub_scalar", |x| x - s, BackOp::SubScalar)
    }

    /// `s - x` elementwise (used for `1 - p` terms).
    pub fn rsub_scalar(&self, s: T) -> TensorResult<Self> {
        self.unary("rsub_scalar", |x| s - x, BackOp::RsubScalar)
    }

    pub fn mul_scalar(&self, s: T) -> TensorResult<Self> {
        self.unary("mul_scalar", |x| x * s, BackOp::MulScalar { s })
    }

    pub fn div_scalar(&self, s: T) -> TensorResult<Self> {
        if s == T::zero() {
            return Err(TensorError::InvalidArg {
                op: "div_scalar",
                msg: "division by zero".into(),
            });
        }
        self.unary("div_scalar", |x| x / s, BackOp::DivScalar { s })
    }

    /// Elementwise `x > threshold` as 0/1 values. Never tracks gradients.
    /// Strict comparison: a value exactly at the threshold is background, so
    /// a constant-0.5 map binarizes to empty at threshold 0.5.
    pub fn gt_scalar(&self, threshold: T) -> Self {
        let n = self.0.borrow();
        let data = n
            .data
            .iter()
            .map(|&x| if x > threshold { T::one() } else { T::zero() })
            .collect();
        Self::leaf(data, n.shape.clone(), false)
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements, as a `[1]` tensor. Fixed four-lane reduction
    /// order, so results are bitwise reproducible.
    pub fn sum(&self) -> TensorResult<Self> {
        let a = self.0.borrow();
        let total = fixed_order_sum(&a.data);
        drop(a);
        check_finite("sum", &[total])?;
        Ok(Self::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            BackOp::SumAll,
        ))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> TensorResult<Self> {
        let a = self.0.borrow();
        if a.data.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = fixed_order_sum(&a.data) / cast::<T>(a.data.len() as f64);
        drop(a);
        check_finite("mean", &[m])?;
        Ok(Self::from_op(
            vec![m],
            vec![1],
            vec![self.clone()],
            BackOp::MeanAll,
        ))
    }

    // ── shape ops ───────────────────────────────────────────────────

    /// Concatenates tensors along `dim`. All other extents must match.
    pub fn concat(parts: &[Self], dim: usize) -> TensorResult<Self> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                msg: "no tensors given".into(),
            });
        }
        let first = parts[0].shape();
        if dim >= first.len() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                msg: format!("dim {} out of range for rank {}", dim, first.len()),
            });
        }
        let mut cat_extent = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != dim && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            cat_extent += s[dim];
        }
        let mut shape = first.clone();
        shape[dim] = cat_extent;
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut data = vec![T::zero(); shape.iter().product()];
        let out_block = cat_extent * inner;
        let mut offset = 0usize;
        for p in parts {
            let pn = p.0.borrow();
            let ext = pn.shape[dim];
            let block = ext * inner;
            for o in 0..outer {
                let src = &pn.data[o * block..(o + 1) * block];
                let dst = &mut data[o * out_block + offset..o * out_block + offset + block];
                dst.copy_from_slice(src);
            }
            offset += block;
        }
        Ok(Self::from_op(
            data,
            shape,
            parts.to_vec(),
            BackOp::Concat { dim },
        ))
    }

    /// A contiguous slice `[start, start+len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> TensorResult<Self> {
        let shape = self.shape();
        if dim >= shape.len() || start + len > shape[dim] || len == 0 {
            return Err(TensorError::InvalidArg {
                op: "narrow",
                msg: format!(
                    "range {}..{} on dim {} of shape {:?}",
                    start,
                    start + len,
                    dim,
                    shape
                ),
            });
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let src_block = shape[dim] * inner;
        let dst_block = len * inner;
        let mut data = vec![T::zero(); outer * dst_block];
        let a = self.0.borrow();
        for o in 0..outer {
            let src = &a.data[o * src_block + start * inner..o * src_block + (start + len) * inner];
            data[o * dst_block..(o + 1) * dst_block].copy_from_slice(src);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        drop(a);
        Ok(Self::from_op(
            data,
            out_shape,
            vec![self.clone()],
            BackOp::Narrow { dim, start },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode backprop from a scalar tensor.
    ///
    /// Accumulates into the persistent `grad` buffer of every reachable leaf
    /// tensor with `requires_grad`; calling twice without `zero_grad` doubles
    /// the grads. Intermediates propagate through per-call buffers but do not
    /// retain gradients, so repeated calls stay independent.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(),
            });
        }
        let order = topo_order(self);
        let mut flowing: HashMap<usize, Vec<T>> = HashMap::new();
        flowing.insert(key(self), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = flowing.remove(&key(t)) else {
                continue;
            };
            let is_leaf = {
                let n = t.0.borrow();
                n.back.is_none()
            };
            if is_leaf {
                let mut n = t.0.borrow_mut();
                if n.requires_grad {
                    match &mut n.grad {
                        Some(grad) => {
                            for (a, b) in grad.iter_mut().zip(&g) {
                                *a = *a + *b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            let n = t.0.borrow();
            if let Some(back) = &n.back {
                propagate(back, &n, &g, &mut flowing)?;
            }
        }
        Ok(())
    }
}

fn key<T: Scalar>(t: &Tensor<T>) -> usize {
    Rc::as_ptr(&t.0) as *const () as usize
}

/// Iterative post-order DFS: parents appear before children.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashMap::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        let k = key(&t);
        if expanded {
            order.push(t);
            continue;
        }
        if visited.contains_key(&k) {
            continue;
        }
        visited.insert(k, ());
        stack.push((t.clone(), true));
        for p in t.0.borrow().parents.iter() {
            if !visited.contains_key(&key(p)) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Adds a gradient contribution, moving the buffer in when the slot is
/// empty (the common single-consumer case pays no extra pass).
fn accumulate<T: Scalar>(flowing: &mut HashMap<usize, Vec<T>>, t: &Tensor<T>, add: Vec<T>) {
    use std::collections::hash_map::Entry;
    match flowing.entry(key(t)) {
        Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&add) {
                *a = *a + *b;
            }
        }
        Entry::Vacant(v) => {
            v.insert(add);
        }
    }
}

/// Applies one op's chain rule, adding contributions into the flowing map.
fn propagate<T: Scalar>(
    back: &BackOp<T>,
    node: &Node<T>,
    g: &[T],
    flowing: &mut HashMap<usize, Vec<T>>,
) -> TensorResult<()> {
    let parents = &node.parents;
    match back {
        BackOp::Add => {
            accumulate(flowing, &parents[0], g.to_vec());
            accumulate(flowing, &parents[1], g.to_vec());
        }
        BackOp::Sub => {
            accumulate(flowing, &parents[0], g.to_vec());
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            accumulate(flowing, &parents[1], neg);
        }
        BackOp::Mul => {
            let a = parents[0].0.borrow();
            let b = parents[1].0.borrow();
            let ga: Vec<T> = g.iter().zip(&b.data).map(|(&v, &y)| v * y).collect();
            let gb: Vec<T> = g.iter().zip(&a.data).map(|(&v, &x)| v * x).collect();
            drop(a);
            drop(b);
            accumulate(flowing, &parents[0], ga);
            accumulate(flowing, &parents[1], gb);
        }
        BackOp::Div => {
            let a = parents[0].0.borrow();
            let b = parents[1].0.borrow();
            let ga: Vec<T> = g.iter().zip(&b.data).map(|(&v, &y)| v / y).collect();
            let gb: Vec<T> = g
                .iter()
                .zip(a.data.iter().zip(&b.data))
                .map(|(&v, (&x, &y))| -v * x / (y * y))
                .collect();
            drop(a);
            drop(b);
            accumulate(flowing, &parents[0], ga);
            accumulate(flowing, &parents[1], gb);
        }
        BackOp::Neg => {
            let ga: Vec<T> = g.iter().map(|&v| -v).collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::Exp => {
            let ga: Vec<T> = g.iter().zip(&node.data).map(|(&v, &y)| v * y).collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::LnClamped { min } => {
            let a = parents[0].0.borrow();
            let ga: Vec<T> = g
                .iter()
                .zip(&a.data)
                .map(|(&v, &x)| if x > *min { v / x } else { T::zero() })
                .collect();
            drop(a);
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::PowScalar { exponent } => {
            let e = *exponent;
            let a = parents[0].0.borrow();
            let ga: Vec<T> = g
                .iter()
                .zip(&a.data)
                .map(|(&v, &x)| {
                    if x == T::zero() {
                        T::zero()
                    } else {
                        v * e * x.powf(e - T::one())
                    }
                })
                .collect();
            drop(a);
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::Sigmoid => {
            let ga: Vec<T> = g
                .iter()
                .zip(&node.data)
                .map(|(&v, &s)| v * s * (T::one() - s))
                .collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::Relu => {
            let a = parents[0].0.borrow();
            let ga: Vec<T> = g
                .iter()
                .zip(&a.data)
                .map(|(&v, &x)| if x > T::zero() { v } else { T::zero() })
                .collect();
            drop(a);
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::AddScalar | BackOp::SubScalar => {
            accumulate(flowing, &parents[0], g.to_vec());
        }
        BackOp::RsubScalar => {
            let ga: Vec<T> = g.iter().map(|&v| -v).collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::MulScalar { s } => {
            let ga: Vec<T> = g.iter().map(|&v| v * *s).collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::DivScalar { s } => {
            let ga: Vec<T> = g.iter().map(|&v| v / *s).collect();
            accumulate(flowing, &parents[0], ga);
        }
        BackOp::SumAll => {
            let n = parents[0].numel();
            accumulate(flowing, &parents[0], vec![g[0]; n]);
        }
        BackOp::MeanAll => {
            let n = parents[0].numel();
            let v = g[0] / cast::<T>(n as f64);
            accumulate(flowing, &parents[0], vec![v; n]);
        }
        BackOp::Concat { dim } => {
            let shape = &node.shape;
            let outer: usize = shape[..*dim].iter().product();
            let inner: usize = shape[*dim + 1..].iter().product();
            let out_block = shape[*dim] * inner;
            let mut offset = 0usize;
            for p in parents {
                let ext = p.0.borrow().shape[*dim];
                let block = ext * inner;
                let mut gp = vec![T::zero(); outer * block];
                for o in 0..outer {
                    gp[o * block..(o + 1) * block].copy_from_slice(
                        &g[o * out_block + offset..o * out_block + offset + block],
                    );
                }
                accumulate(flowing, p, gp);
                offset += block;
            }
        }
        BackOp::Narrow { dim, start } => {
            let parent_shape = parents[0].shape();
            let outer: usize = parent_shape[..*dim].iter().product();
            let inner: usize = parent_shape[*dim + 1..].iter().product();
            let src_block = node.shape[*dim] * inner;
            let dst_block = parent_shape[*dim] * inner;
            let mut gp = vec![T::zero(); outer * dst_block];
            for o in 0..outer {
                gp[o * dst_block + start * inner..o * dst_block + start * inner + src_block]
                    .copy_from_slice(&g[o * src_block..(o + 1) * src_block]);
            }
            accumulate(flowing, &parents[0], gp);
        }
        BackOp::Conv2d { stride, padding } => {
            let (gi, gw, gb) = super::conv::conv2d_backward(
                &parents[0], &parents[1], g, &node.shape, *stride, *padding,
            );
            accumulate(flowing, &parents[0], gi);
            accumulate(flowing, &parents[1], gw);
            accumulate(flowing, &parents[2], gb);
        }
        BackOp::MaxPool2x { argmax } => {
            let n = parents[0].numel();
            let mut gp = vec![T::zero(); n];
            for (out_i, &src) in argmax.iter().enumerate() {
                gp[src as usize] = gp[src as usize] + g[out_i];
            }
            accumulate(flowing, &parents[0], gp);
        }
        BackOp::Upsample2x => {
            let gp = super::conv::upsample2x_backward(g, &node.shape);
            accumulate(flowing, &parents[0], gp);
        }
    }
    Ok(())
}

/// Sums with a fixed 4-lane split so the reduction order never depends on the
/// optimizer or platform vector width.
pub(crate) fn fixed_order_sum<T: Scalar>(data: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = data.chunks_exact(4);
    let rem = chunks.remainder();
    for c in chunks {
        acc[0] = acc[0] + c[0];
        acc[1] = acc[1] + c[1];
        acc[2] = acc[2] + c[2];
        acc[3] = acc[3] + c[3];
    }
    let mut tail = T::zero();
    for &v in rem {
        tail = tail + v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}
