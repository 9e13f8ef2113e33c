//! Pointwise maps, broadcasting binary arithmetic, reductions, and softmax.

use alloc::vec;
use alloc::vec::Vec;

use super::broadcast::{broadcast_dims, reduce_to_shape, zip_broadcast};
use super::{Op, Tape, TensorError, Var};
use crate::scalar::Scalar;

#[inline]
pub(crate) fn logistic_fn<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_fn<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) without overflow on either tail
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> Tape<S> {
    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let dims = self.nodes[x.0].dims.clone();
        let needs = self.needs(x);
        self.push(dims, data, needs, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu { x })
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.unary(x, logistic_fn, Op::Logistic { x })
    }

    /// Limit values to `[lo, hi]`; gradients pass only through the interior.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_fn, Op::Softplus { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln { x })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnMut(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        let out_dims = broadcast_dims(&self.nodes[a.0].dims, &self.nodes[b.0].dims)?;
        let data = zip_broadcast(
            &self.nodes[a.0].data,
            &self.nodes[a.0].dims,
            &self.nodes[b.0].data,
            &self.nodes[b.0].dims,
            &out_dims,
            f,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_dims, data, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise square; gradients flow through both factor slots.
    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("square is shape-compatible with itself")
    }

    /// Sum over one axis. `keepdim` retains the axis with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if axis >= dims.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: dims.len() });
        }
        let outer: usize = dims[..axis].iter().product();
        let extent = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * inner];
        let src = &self.nodes[x.0].data;
        for o in 0..outer {
            let out_base = o * inner;
            for k in 0..extent {
                let src_base = (o * extent + k) * inner;
                for i in 0..inner {
                    data[out_base + i] = data[out_base + i] + src[src_base + i];
                }
            }
        }
        let mut out_dims = dims;
        if keepdim {
            out_dims[axis] = 1;
        } else {
            out_dims.remove(axis);
            if out_dims.is_empty() {
                out_dims.push(1);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out_dims, data, needs, Op::SumAxis { x, axis }))
    }

    /// Sum over several axes (applied highest-axis first).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = x;
        for &axis in sorted.iter().rev() {
            v = self.sum_axis(v, axis, keepdim)?;
        }
        Ok(v)
    }

    /// Mean over several axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let dims = &self.nodes[x.0].dims;
        let mut count = 1usize;
        for &axis in axes {
            if axis >= dims.len() {
                return Err(TensorError::AxisOutOfRange { axis, rank: dims.len() });
            }
            count *= dims[axis];
        }
        let s = self.sum_axes(x, axes, keepdim)?;
        Ok(self.scale(s, S::one() / S::from_usize(count)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let numel = self.nodes[x.0].data.len();
        let flat = self.reshape(x, &[numel]).expect("flatten preserves numel");
        self.sum_axis(flat, 0, false).expect("axis 0 valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let numel = self.nodes[x.0].data.len();
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::from_usize(numel))
    }

    /// Softmax along one axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if axis >= dims.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: dims.len() });
        }
        let outer: usize = dims[..axis].iter().product();
        let extent = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut m = S::neg_infinity();
                for k in 0..extent {
                    m = m.max(src[base + k * inner]);
                }
                let mut total = S::zero();
                for k in 0..extent {
                    let e = (src[base + k * inner] - m).exp();
                    data[base + k * inner] = e;
                    total = total + e;
                }
                for k in 0..extent {
                    data[base + k * inner] = data[base + k * inner] / total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(dims, data, needs, Op::Softmax { x, axis }))
    }
}

pub(crate) fn relu_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], x: Var) {
    let _ = out;
    let dx: Vec<S> = g
        .iter()
        .zip(t.nodes[x.0].data.iter())
        .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
        .collect();
    t.accumulate(x, dx);
}

pub(crate) fn logistic_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], x: Var) {
    let dx: Vec<S> = g
        .iter()
        .zip(t.nodes[out].data.iter())
        .map(|(&gi, &s)| gi * s * (S::one() - s))
        .collect();
    t.accumulate(x, dx);
}

pub(crate) fn clamp_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var, lo: S, hi: S) {
    let dx: Vec<S> = g
        .iter()
        .zip(t.nodes[x.0].data.iter())
        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { S::zero() })
        .collect();
    t.accumulate(x, dx);
}

pub(crate) fn softplus_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var) {
    let dx: Vec<S> = g
        .iter()
        .zip(t.nodes[x.0].data.iter())
        .map(|(&gi, &xi)| gi * logistic_fn(xi))
        .collect();
    t.accumulate(x, dx);
}

pub(crate) fn ln_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var) {
    let dx: Vec<S> =
        g.iter().zip(t.nodes[x.0].data.iter()).map(|(&gi, &xi)| gi / xi).collect();
    t.accumulate(x, dx);
}

pub(crate) fn scale_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var, c: S) {
    let dx: Vec<S> = g.iter().map(|&gi| gi * c).collect();
    t.accumulate(x, dx);
}

pub(crate) fn add_scalar_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var) {
    t.accumulate(x, g.to_vec());
}

pub(crate) fn add_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], a: Var, b: Var) {
    let out_dims = t.nodes[out].dims.clone();
    if t.needs(a) {
        let da = reduce_to_shape(g, &out_dims, &t.nodes[a.0].dims);
        t.accumulate(a, da);
    }
    if t.needs(b) {
        let db = reduce_to_shape(g, &out_dims, &t.nodes[b.0].dims);
        t.accumulate(b, db);
    }
}

pub(crate) fn sub_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], a: Var, b: Var) {
    let out_dims = t.nodes[out].dims.clone();
    if t.needs(a) {
        let da = reduce_to_shape(g, &out_dims, &t.nodes[a.0].dims);
        t.accumulate(a, da);
    }
    if t.needs(b) {
        let neg: Vec<S> = g.iter().map(|&v| -v).collect();
        let db = reduce_to_shape(&neg, &out_dims, &t.nodes[b.0].dims);
        t.accumulate(b, db);
    }
}

pub(crate) fn mul_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], a: Var, b: Var) {
    let out_dims = t.nodes[out].dims.clone();
    if t.needs(a) {
        let full = zip_broadcast(
            g,
            &out_dims,
            &t.nodes[b.0].data,
            &t.nodes[b.0].dims,
            &out_dims,
            |gi, bi| gi * bi,
        );
        let da = reduce_to_shape(&full, &out_dims, &t.nodes[a.0].dims);
        t.accumulate(a, da);
    }
    if t.needs(b) {
        let full = zip_broadcast(
            g,
            &out_dims,
            &t.nodes[a.0].data,
            &t.nodes[a.0].dims,
            &out_dims,
            |gi, ai| gi * ai,
        );
        let db = reduce_to_shape(&full, &out_dims, &t.nodes[b.0].dims);
        t.accumulate(b, db);
    }
}

pub(crate) fn div_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], a: Var, b: Var) {
    let out_dims = t.nodes[out].dims.clone();
    if t.needs(a) {
        let full = zip_broadcast(
            g,
            &out_dims,
            &t.nodes[b.0].data,
            &t.nodes[b.0].dims,
            &out_dims,
            |gi, bi| gi / bi,
        );
        let da = reduce_to_shape(&full, &out_dims, &t.nodes[a.0].dims);
        t.accumulate(a, da);
    }
    if t.needs(b) {
        // d(a/b)/db = -a/b^2 = -out/b
        let scaled: Vec<S> = g
            .iter()
            .zip(t.nodes[out].data.iter())
            .map(|(&gi, &oi)| -gi * oi)
            .collect();
        let full = zip_broadcast(
            &scaled,
            &out_dims,
            &t.nodes[b.0].data,
            &t.nodes[b.0].dims,
            &out_dims,
            |si, bi| si / bi,
        );
        let db = reduce_to_shape(&full, &out_dims, &t.nodes[b.0].dims);
        t.accumulate(b, db);
    }
}

pub(crate) fn sum_axis_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], x: Var, axis: usize) {
    let dims = t.nodes[x.0].dims.clone();
    let _ = out;
    let outer: usize = dims[..axis].iter().product();
    let extent = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut dx = vec![S::zero(); t.nodes[x.0].data.len()];
    for o in 0..outer {
        let g_base = o * inner;
        for k in 0..extent {
            let dst = (o * extent + k) * inner;
            dx[dst..dst + inner].copy_from_slice(&g[g_base..g_base + inner]);
        }
    }
    t.accumulate(x, dx);
}

pub(crate) fn softmax_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], x: Var, axis: usize) {
    let dims = t.nodes[out].dims.clone();
    let outer: usize = dims[..axis].iter().product();
    let extent = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let s = &t.nodes[out].data;
    let mut dx = vec![S::zero(); s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut dot = S::zero();
            for k in 0..extent {
                let idx = base + k * inner;
                dot = dot + g[idx] * s[idx];
            }
            for k in 0..extent {
                let idx = base + k * inner;
                dx[idx] = s[idx] * (g[idx] - dot);
            }
        }
    }
    t.accumulate(x, dx);
}
