//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op pushes a node holding its value and enough saved state to
//! run its adjoint. Node ids grow with construction order, so replaying
//! ids in reverse is a valid topological order for the backward pass.
//! Values are never mutated once recorded.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::linalg::{transpose, Lu};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, expand_to, numel_of, split_axis, sum_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Square,
    Sqrt,
    Abs,
}

/// Adjoint of a user-supplied op: `(grad_out, inputs, output) -> grads`,
/// one gradient per input in input order.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[Rc<Tensor<T>>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Unary(Unary, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    ClampMin(usize, T),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    SumTo(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow { input: usize, axis: usize, start: usize },
    SpaceToDepth(usize),
    DepthToSpace(usize),
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    LogAbsDet { input: usize, inv_t: Tensor<T> },
    Custom { name: String, inputs: Vec<usize>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Unary(u, _) => format!("{:?}", u).to_lowercase(),
            Op::AddScalar(_) => "add_scalar".into(),
            Op::MulScalar(..) => "mul_scalar".into(),
            Op::ClampMin(..) => "clamp_min".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Div(..) => "div".into(),
            Op::SumTo(_) => "sum".into(),
            Op::Reshape(_) => "reshape".into(),
            Op::Concat(..) => "concat".into(),
            Op::Narrow { .. } => "narrow".into(),
            Op::SpaceToDepth(_) => "space_to_depth".into(),
            Op::DepthToSpace(_) => "depth_to_space".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::Conv2d { .. } => "conv2d".into(),
            Op::MaxPool2 { .. } => "max_pool2".into(),
            Op::LogAbsDet { .. } => "log_abs_det".into(),
            Op::Custom { name, .. } => name.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(TensorError::Domain(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = inputs.iter().any(|&i| self.needs_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// A leaf. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenation along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(out, Op::Concat(ids.clone(), axis), &ids)
    }

    /// Records an op whose value was computed by the caller and whose
    /// adjoint is `backward`.
    pub fn custom<'t>(
        &'t self,
        name: &str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: ids.clone(),
                backward,
            },
            &ids,
        )
    }

    /// Propagates `d loss / d node` back through the tape. `loss` must hold
    /// exactly one element. Every `requires_grad` leaf recorded before
    /// `loss` receives a gradient, zero if it does not influence `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => {
                    if matches!(node.op, Op::Leaf) {
                        out.grads.insert(id, Tensor::zeros(node.value.shape().to_vec()));
                    }
                    continue;
                }
            };
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(id, g);
                continue;
            }
            for (input, gi) in input_grads(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    let data: Vec<T> = match kind {
        Unary::Neg => g.data().iter().map(|&g| -g).collect(),
        Unary::Exp => g.data().iter().zip(y.data()).map(|(&g, &y)| g * y).collect(),
        Unary::Log => g.data().iter().zip(x.data()).map(|(&g, &x)| g / x).collect(),
        Unary::Tanh => g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| g * (T::one() - y * y))
            .collect(),
        Unary::Relu => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Unary::Sigmoid => g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect(),
        Unary::Softplus => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| g * sigmoid(x))
            .collect(),
        Unary::Square => g.data().iter().zip(x.data()).map(|(&g, &x)| g * two * x).collect(),
        Unary::Sqrt => g.data().iter().zip(y.data()).map(|(&g, &y)| g / (two * y)).collect(),
        Unary::Abs => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .collect(),
    };
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn input_grads<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| nodes[id].value.as_ref();
    let out = node.value.as_ref();
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Unary(kind, a) => vec![(*a, unary_grad(*kind, val(*a), out, g))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MulScalar(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::ClampMin(a, c) => vec![(
            *a,
            g.zip_map(val(*a), |g, x| if x > *c { g } else { T::zero() })?,
        )],
        Op::Add(a, b) => vec![
            (*a, sum_to_shape(g, val(*a).shape())),
            (*b, sum_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, sum_to_shape(g, val(*a).shape())),
            (*b, sum_to_shape(&g.map(|v| -v), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![
                (*a, sum_to_shape(&broadcast_zip(g, vb, |g, b| g * b)?, va.shape())),
                (*b, sum_to_shape(&broadcast_zip(g, va, |g, a| g * a)?, vb.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = broadcast_zip(g, vb, |g, b| g / b)?;
            let gy = g.zip_map(out, |g, y| -g * y)?;
            let gb = broadcast_zip(&gy, vb, |gy, b| gy / b)?;
            vec![(*a, sum_to_shape(&ga, va.shape())), (*b, sum_to_shape(&gb, vb.shape()))]
        }
        Op::SumTo(a) => vec![(*a, expand_to(g, val(*a).shape()))],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
        Op::Concat(ids, axis) => {
            let mut start = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let len = val(id).shape()[*axis];
                res.push((id, g.narrow(*axis, start, len)?));
                start += len;
            }
            res
        }
        Op::Narrow { input, axis, start } => {
            let shape = val(*input).shape().to_vec();
            let (outer, dim, inner) = split_axis(&shape, *axis);
            let len = g.shape()[*axis];
            let mut full = vec![T::zero(); numel_of(&shape)];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                full[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::new(shape, full)?)]
        }
        Op::SpaceToDepth(a) => {
            let (n, c, h, w) = g.dims4()?;
            let data = kernels::depth_to_space(n, c, h, w, g.data());
            vec![(*a, Tensor::new(val(*a).shape().to_vec(), data)?)]
        }
        Op::DepthToSpace(a) => {
            let (n, c, h, w) = g.dims4()?;
            let data = kernels::space_to_depth(n, c, h, w, g.data());
            vec![(*a, Tensor::new(val(*a).shape().to_vec(), data)?)]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut da = vec![T::zero(); m * k];
            kernels::gemm_a_bt(m, n, k, g.data(), vb.data(), &mut da);
            let mut db = vec![T::zero(); k * n];
            kernels::gemm_at_b(k, m, n, va.data(), g.data(), &mut db);
            vec![
                (*a, Tensor::new(va.shape().to_vec(), da)?),
                (*b, Tensor::new(vb.shape().to_vec(), db)?),
            ]
        }
        Op::Conv2d { input, kernel, geom } => {
            let (vi, vk) = (val(*input), val(*kernel));
            let (di, dk) = kernels::conv2d_backward(
                geom,
                vi.shape()[0],
                vk.shape()[0],
                vi.data(),
                vk.data(),
                g.data(),
                nodes[*input].requires_grad,
                nodes[*kernel].requires_grad,
            );
            let mut res = Vec::new();
            if !di.is_empty() {
                res.push((*input, Tensor::new(vi.shape().to_vec(), di)?));
            }
            if !dk.is_empty() {
                res.push((*kernel, Tensor::new(vk.shape().to_vec(), dk)?));
            }
            res
        }
        Op::MaxPool2 { input, argmax } => {
            let shape = val(*input).shape().to_vec();
            let mut full = vec![T::zero(); numel_of(&shape)];
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                full[i] += gv;
            }
            vec![(*input, Tensor::new(shape, full)?)]
        }
        Op::LogAbsDet { input, inv_t } => {
            let s = g.data()[0];
            vec![(*input, inv_t.map(|v| v * s))]
        }
        Op::Custom { inputs, backward, .. } => {
            let vals: Vec<Rc<Tensor<T>>> = inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let gs = backward(g, &vals, out);
            if gs.len() != inputs.len() {
                return Err(TensorError::Contract(format!(
                    "custom op returned {} gradients for {} inputs",
                    gs.len(),
                    inputs.len()
                )));
            }
            inputs.iter().copied().zip(gs).collect()
        }
    })
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("vars belong to different tapes".into()))
        }
    }

    fn unary(&self, kind: Unary) -> Result<Self> {
        let x = self.value();
        let out = match kind {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
                    return Err(TensorError::Domain(format!("log of non-positive value {}", bad)));
                }
                x.map(|v| v.ln())
            }
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Relu => x.map(|v| v.max(T::zero())),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
            Unary::Square => x.map(|v| v * v),
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| **v < T::zero()) {
                    return Err(TensorError::Domain(format!("sqrt of negative value {}", bad)));
                }
                x.map(|v| v.sqrt())
            }
            Unary::Abs => x.map(|v| v.abs()),
        };
        self.tape.push(out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Result<Self> {
        self.unary(Unary::Exp)
    }
    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&self) -> Result<Self> {
        self.unary(Unary::Log)
    }
    pub fn tanh(&self) -> Result<Self> {
        self.unary(Unary::Tanh)
    }
    pub fn relu(&self) -> Result<Self> {
        self.unary(Unary::Relu)
    }
    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(Unary::Sigmoid)
    }
    pub fn softplus(&self) -> Result<Self> {
        self.unary(Unary::Softplus)
    }
    pub fn square(&self) -> Result<Self> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(&self) -> Result<Self> {
        self.unary(Unary::Sqrt)
    }
    pub fn abs(&self) -> Result<Self> {
        self.unary(Unary::Abs)
    }

    /// `ln σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(&self) -> Result<Self> {
        self.neg()?.softplus()?.neg()
    }

    pub fn add_scalar(&self, c: T) -> Result<Self> {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(&self, c: T) -> Result<Self> {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::MulScalar(self.id, c), &[self.id])
    }

    /// `max(x, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, c: T) -> Result<Self> {
        let out = self.value().map(|v| v.max(c));
        self.tape.push(out, Op::ClampMin(self.id, c), &[self.id])
    }

    fn binary(&self, other: &Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_tape(other)?;
        let out = broadcast_zip(&self.value(), &other.value(), f)?;
        self.tape.push(out, op, &[self.id, other.id])
    }

    /// Broadcasting add; see [`crate::broadcast_shapes`] for the rule.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Broadcasting divide; a zero anywhere in the divisor is a domain error.
    pub fn div(&self, other: &Self) -> Result<Self> {
        if other.value().data().iter().any(|v| *v == T::zero()) {
            return Err(TensorError::Domain("division by zero".into()));
        }
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum(&self) -> Result<Self> {
        let out = sum_to_shape(&self.value(), &[]);
        self.tape.push(out, Op::SumTo(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Self> {
        let n = self.value().numel();
        self.sum()?.mul_scalar(T::one() / T::of(n as f64))
    }

    /// Sums over `axes`, keeping them as extent-1 dims when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Self> {
        let shape = self.shape();
        if let Some(bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return shape_err(format!("sum axis {} out of range for {:?}", bad, shape));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out = sum_to_shape(&self.value(), &kept);
        let summed = self.tape.push(out, Op::SumTo(self.id), &[self.id])?;
        if keepdim {
            Ok(summed)
        } else {
            let squeezed: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            summed.reshape(squeezed)
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Self> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes, keepdim)?.mul_scalar(T::one() / T::of(count as f64))
    }

    /// Sums everything but the leading (batch) axis, giving shape `[N]`.
    pub fn sum_per_item(&self) -> Result<Self> {
        let rank = self.shape().len();
        if rank == 0 {
            return shape_err("sum_per_item of a rank-0 var");
        }
        let axes: Vec<usize> = (1..rank).collect();
        self.sum_axes(&axes, false)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let out = self.value().narrow(axis, start, len)?;
        self.tape.push(
            out,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// 2×2 space-to-depth, `[N,C,H,W] → [N,4C,H/2,W/2]`.
    pub fn space_to_depth(&self) -> Result<Self> {
        let v = self.value();
        let (n, c, h, w) = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("squeeze needs even spatial extents, got {}x{}", h, w));
        }
        let data = kernels::space_to_depth(n, c, h, w, v.data());
        let out = Tensor::new([n, 4 * c, h / 2, w / 2], data)?;
        self.tape.push(out, Op::SpaceToDepth(self.id), &[self.id])
    }

    /// Inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(&self) -> Result<Self> {
        let v = self.value();
        let (n, c, h, w) = v.dims4()?;
        if c % 4 != 0 {
            return shape_err(format!("unsqueeze needs channels divisible by 4, got {}", c));
        }
        let data = kernels::depth_to_space(n, c, h, w, v.data());
        let out = Tensor::new([n, c / 4, h * 2, w * 2], data)?;
        self.tape.push(out, Op::DepthToSpace(self.id), &[self.id])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.same_tape(other)?;
        let out = crate::linalg::matmul(&self.value(), &other.value())?;
        self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// Cross-correlation (no kernel flip) of `[N,C,H,W]` with `[O,C,kh,kw]`,
    /// zero padding `(ph, pw)` and stride `(sh, sw)`.
    pub fn conv2d(&self, kernel: &Self, padding: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        self.same_tape(kernel)?;
        let (vi, vk) = (self.value(), kernel.value());
        let (n, c, h, w) = vi.dims4()?;
        let (o, kc, kh, kw) = vk.dims4()?;
        if kc != c {
            return shape_err(format!("conv2d kernel expects {} channels, input has {}", kc, c));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv2d stride must be positive");
        }
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return shape_err(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding.0,
                w + 2 * padding.1
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            pad_h: padding.0,
            pad_w: padding.1,
            stride_h: stride.0,
            stride_w: stride.1,
        };
        let data = kernels::conv2d_forward(&geom, n, o, vi.data(), vk.data());
        let out = Tensor::new([n, o, geom.out_h(), geom.out_w()], data)?;
        self.tape.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        )
    }

    /// 2×2 stride-2 max pooling.
    pub fn max_pool2(&self) -> Result<Self> {
        let v = self.value();
        let (n, c, h, w) = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even spatial extents, got {}x{}", h, w));
        }
        let (data, argmax) = kernels::max_pool2(n, c, h, w, v.data());
        let out = Tensor::new([n, c, h / 2, w / 2], data)?;
        self.tape.push(out, Op::MaxPool2 { input: self.id, argmax }, &[self.id])
    }

    /// `ln|det A|` of a square matrix as a rank-0 var. A zero determinant
    /// is reported as singular.
    pub fn log_abs_det(&self) -> Result<Self> {
        let v = self.value();
        let lu = Lu::new(&v)?;
        if lu.det() == T::zero() {
            return Err(TensorError::Singular("log_abs_det of a singular matrix".into()));
        }
        let inv_t = transpose(&lu.inverse())?;
        let out = Tensor::scalar(lu.log_abs_det());
        self.tape.push(out, Op::LogAbsDet { input: self.id, inv_t }, &[self.id])
    }

    /// Inverse of a square matrix; singular when `|det A| < tol`.
    pub fn inverse(&self, tol: f64) -> Result<Self> {
        let inv = crate::linalg::inverse(&self.value(), tol)?;
        self.tape.custom(
            "inverse",
            &[*self],
            inv,
            Box::new(|g, _, out| {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹, so the adjoint is -A⁻ᵀ G A⁻ᵀ.
                let t = transpose(out).expect("square");
                let tg = crate::linalg::matmul(&t, g).expect("square");
                let r = crate::linalg::matmul(&tg, &t).expect("square");
                vec![r.map(|v| -v)]
            }),
        )
    }
}
