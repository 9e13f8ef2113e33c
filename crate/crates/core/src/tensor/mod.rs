//! Dense tensors with a recording tape for reverse-mode automatic
//! differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass as a flat,
//! append-only list of nodes. Operations record enough metadata to run the
//! backward sweep in exact reverse execution order; gradients accumulate
//! additively when a value feeds several consumers. Tensors are immutable
//! once created except for their gradient buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

mod broadcast;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape_ops;

pub use broadcast::broadcast_dims;
pub use norm::BnStats;

pub(crate) mod par;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Errors surfaced by tensor operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// Dims and buffer length disagree, or operand shapes are incompatible.
    Shape(alloc::string::String),
    /// Axis index outside the tensor rank.
    AxisOutOfRange { axis: usize, rank: usize },
    /// Index outside an axis extent.
    IndexOutOfRange { index: usize, extent: usize },
    /// `backward` called on a non-scalar tensor.
    NonScalarLoss { numel: usize },
    /// `backward` called twice on one recording.
    BackwardTwice,
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: &'static str },
    /// Batch statistics are undefined (fewer than two elements per channel).
    DegenerateBatch { count: usize },
}

impl core::fmt::Display for TensorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TensorError::Shape(msg) => write!(f, "shape error: {msg}"),
            TensorError::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            TensorError::IndexOutOfRange { index, extent } => {
                write!(f, "index {index} out of range for extent {extent}")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            TensorError::BackwardTwice => {
                write!(f, "backward already ran on this tape; record a new graph first")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            TensorError::DegenerateBatch { count } => {
                write!(f, "batch statistics undefined over {count} element(s)")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        TensorError::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;

/// Recorded operation; holds what the backward pass needs.
#[derive(Clone, Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Relu { x: Var },
    Logistic { x: Var },
    Clamp { x: Var, lo: S, hi: S },
    Softplus { x: Var },
    Ln { x: Var },
    Scale { x: Var, c: S },
    AddScalar { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
        mean: Vec<S>,
        var: Vec<S>,
        training: bool,
    },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul4 { a: Var, b: Var },
    Upsample2x { x: Var },
    WindowGather { x: Var, kh: usize, kw: usize, stride: usize, pad: usize },
    GatherClass { x: Var, idx: Vec<usize> },
}

pub(crate) struct Node<S: Scalar> {
    pub dims: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub needs_grad: bool,
    pub op: Op<S>,
}

/// Flat recording of one forward computation.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(
        &mut self,
        data: Vec<S>,
        dims: &[usize],
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let numel: usize = dims.iter().product();
        if numel != data.len() || dims.iter().any(|&d| d == 0) {
            return Err(shape_err!(
                "leaf dims {:?} (numel {}) do not match buffer of {} elements",
                dims,
                numel,
                data.len()
            ));
        }
        Ok(self.push(dims.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Constant leaf filled with one value; never receives gradients.
    pub fn constant(&mut self, value: S, dims: &[usize]) -> Var {
        let numel: usize = dims.iter().product();
        self.push(dims.to_vec(), vec![value; numel], false, Op::Leaf)
    }

    /// Scalar constant.
    pub fn scalar(&mut self, value: S) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub(crate) fn push(
        &mut self,
        dims: Vec<usize>,
        data: Vec<S>,
        needs_grad: bool,
        op: Op<S>,
    ) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node { dims, data, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient buffer, present after `backward` for participating tensors.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Errors when any element of `v` is NaN or infinite.
    pub fn assert_finite(&self, v: Var, context: &'static str) -> Result<(), TensorError> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { context })
        }
    }

    /// Run the backward sweep from a scalar loss. Populates gradients on every
    /// tensor that participates in the loss; gradient-requiring leaves that do
    /// not participate receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let numel = self.nodes[loss.0].data.len();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any gradient target; zero-fill leaves.
            self.zero_fill_detached();
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            self.dispatch_backward(i, &g, &op);
            self.nodes[i].grad = Some(g);
        }
        self.zero_fill_detached();
        Ok(())
    }

    fn zero_fill_detached(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.grad.is_none() {
                node.grad = Some(vec![S::zero(); node.data.len()]);
            }
        }
    }

    /// Add `delta` into the gradient buffer of `v` (allocating it on first use).
    pub(crate) fn accumulate(&mut self, v: Var, delta: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.nodes[v.0].data.len());
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi = *gi + *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn dispatch_backward(&mut self, out: usize, g: &[S], op: &Op<S>) {
        match op {
            Op::Leaf => {}
            Op::Relu { x } => elementwise::relu_bwd(self, out, g, *x),
            Op::Logistic { x } => elementwise::logistic_bwd(self, out, g, *x),
            Op::Clamp { x, lo, hi } => elementwise::clamp_bwd(self, g, *x, *lo, *hi),
            Op::Softplus { x } => elementwise::softplus_bwd(self, g, *x),
            Op::Ln { x } => elementwise::ln_bwd(self, g, *x),
            Op::Scale { x, c } => elementwise::scale_bwd(self, g, *x, *c),
            Op::AddScalar { x } => elementwise::add_scalar_bwd(self, g, *x),
            Op::Add { a, b } => elementwise::add_bwd(self, out, g, *a, *b),
            Op::Sub { a, b } => elementwise::sub_bwd(self, out, g, *a, *b),
            Op::Mul { a, b } => elementwise::mul_bwd(self, out, g, *a, *b),
            Op::Div { a, b } => elementwise::div_bwd(self, out, g, *a, *b),
            Op::SumAxis { x, axis } => elementwise::sum_axis_bwd(self, out, g, *x, *axis),
            Op::Softmax { x, axis } => elementwise::softmax_bwd(self, out, g, *x, *axis),
            Op::Reshape { x } => shape_ops::reshape_bwd(self, g, *x),
            Op::Permute { x, perm } => shape_ops::permute_bwd(self, g, *x, perm),
            Op::Narrow { x, axis, start } => shape_ops::narrow_bwd(self, out, g, *x, *axis, *start),
            Op::Concat { xs, axis } => shape_ops::concat_bwd(self, g, xs, *axis),
            Op::Conv2d { x, w, b, stride, pad } => {
                conv::conv2d_bwd(self, out, g, *x, *w, *b, *stride, *pad)
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                conv::conv_transpose2d_bwd(self, out, g, *x, *w, *b, *stride, *pad)
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, training } => {
                norm::batchnorm_bwd(self, g, *x, *gamma, *beta, *eps, mean, var, *training)
            }
            Op::Linear { x, w, b } => linalg::linear_bwd(self, g, *x, *w, *b),
            Op::Matmul4 { a, b } => linalg::matmul4_bwd(self, out, g, *a, *b),
            Op::Upsample2x { x } => conv::upsample2x_bwd(self, g, *x),
            Op::WindowGather { x, kh, kw, stride, pad } => {
                shape_ops::window_gather_bwd(self, g, *x, *kh, *kw, *stride, *pad)
            }
            Op::GatherClass { x, idx } => shape_ops::gather_class_bwd(self, out, g, *x, idx),
        }
    }
}
