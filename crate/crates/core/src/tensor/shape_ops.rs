//! Layout operations: reshape, permute, narrow, concat, plus the capsule
//! helpers `window_gather` (sliding receptive-field extraction) and
//! `gather_class` (per-sample class selection).

use alloc::vec;
use alloc::vec::Vec;

use super::broadcast::strides;
use super::{shape_err, Op, Tape, TensorError, Var};
use crate::scalar::Scalar;

impl<S: Scalar> Tape<S> {
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = dims.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(shape_err!(
                "reshape to {:?} changes element count {} -> {}",
                dims,
                self.nodes[x.0].data.len(),
                numel
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(dims.to_vec(), data, needs, Op::Reshape { x }))
    }

    /// Reorder axes; `perm[i]` names the source axis placed at position `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        let rank = dims.len();
        if perm.len() != rank {
            return Err(shape_err!("permutation {:?} does not match rank {}", perm, rank));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(shape_err!("invalid permutation {:?}", perm));
            }
            seen[p] = true;
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let data = permute_copy(&self.nodes[x.0].data, &dims, perm);
        let needs = self.needs(x);
        Ok(self.push(out_dims, data, needs, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if axis >= dims.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: dims.len() });
        }
        if start + len > dims[axis] || len == 0 {
            return Err(shape_err!(
                "narrow [{start}, {start}+{len}) exceeds axis {axis} extent {}",
                dims[axis]
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let extent = dims[axis];
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(out_dims, data, needs, Op::Narrow { x, axis, start }))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base_dims = self.nodes[first.0].dims.clone();
        if axis >= base_dims.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: base_dims.len() });
        }
        let mut total = 0usize;
        for &v in xs {
            let d = &self.nodes[v.0].dims;
            if d.len() != base_dims.len()
                || d.iter().zip(base_dims.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!(
                    "concat operand dims {:?} incompatible with {:?} on axis {axis}",
                    d,
                    base_dims
                ));
            }
            total += d[axis];
        }
        let outer: usize = base_dims[..axis].iter().product();
        let inner: usize = base_dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let extent = self.nodes[v.0].dims[axis];
                let src = &self.nodes[v.0].data;
                let base = o * extent * inner;
                data.extend_from_slice(&src[base..base + extent * inner]);
            }
        }
        let mut out_dims = base_dims;
        out_dims[axis] = total;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out_dims, data, needs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Extract sliding windows from a capsule grid.
    ///
    /// Input `[N, K, H, W, D]`, output `[N, PH, PW, K, kh, kw, D]` where the
    /// parent grid (PH, PW) follows the convolution size formula with zero
    /// padding (padded positions read as zeros).
    pub fn window_gather(
        &mut self,
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if dims.len() != 5 {
            return Err(shape_err!("window_gather expects rank-5 input, got {:?}", dims));
        }
        let (n, k, h, w, d) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        if kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
            return Err(shape_err!(
                "window {kh}x{kw} stride {stride} does not fit padded grid {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let ph = (h + 2 * pad - kh) / stride + 1;
        let pw = (w + 2 * pad - kw) / stride + 1;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); n * ph * pw * k * kh * kw * d];
        let mut o = 0usize;
        for ni in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    for ki in 0..k {
                        for dy in 0..kh {
                            let y = (py * stride + dy) as isize - pad as isize;
                            for dx in 0..kw {
                                let xx = (px * stride + dx) as isize - pad as isize;
                                if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                                    let base =
                                        (((ni * k + ki) * h + y as usize) * w + xx as usize) * d;
                                    data[o..o + d].copy_from_slice(&src[base..base + d]);
                                }
                                o += d;
                            }
                        }
                    }
                }
            }
        }
        let out_dims = vec![n, ph, pw, k, kh, kw, d];
        let needs = self.needs(x);
        Ok(self.push(out_dims, data, needs, Op::WindowGather { x, kh, kw, stride, pad }))
    }

    /// Select one slice along axis 1 per batch element: input `[N, C, ...]`
    /// with `idx` of length N gives `[N, ...]`. Gradients flow only into the
    /// selected slices.
    pub fn gather_class(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let dims = self.nodes[x.0].dims.clone();
        if dims.len() < 2 {
            return Err(shape_err!("gather_class expects rank >= 2, got {:?}", dims));
        }
        let (n, c) = (dims[0], dims[1]);
        if idx.len() != n {
            return Err(shape_err!("gather_class got {} indices for batch {}", idx.len(), n));
        }
        let inner: usize = dims[2..].iter().product();
        for &i in idx {
            if i >= c {
                return Err(TensorError::IndexOutOfRange { index: i, extent: c });
            }
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(n * inner);
        for (ni, &ci) in idx.iter().enumerate() {
            let base = (ni * c + ci) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_dims = vec![n];
        out_dims.extend_from_slice(&dims[2..]);
        let needs = self.needs(x);
        Ok(self.push(out_dims, data, needs, Op::GatherClass { x, idx: idx.to_vec() }))
    }
}

fn permute_copy<S: Scalar>(src: &[S], dims: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = dims.len();
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides = strides(dims);
    // stride to advance in src when the i-th OUTPUT axis increments
    let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= walk[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn reshape_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var) {
    t.accumulate(x, g.to_vec());
}

pub(crate) fn permute_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var, perm: &[usize]) {
    // gradient flows through the inverse permutation
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| t.nodes[x.0].dims[p]).collect();
    let dx = permute_copy(g, &out_dims, &inv);
    t.accumulate(x, dx);
}

pub(crate) fn narrow_bwd<S: Scalar>(
    t: &mut Tape<S>,
    out: usize,
    g: &[S],
    x: Var,
    axis: usize,
    start: usize,
) {
    let dims = t.nodes[x.0].dims.clone();
    let len = t.nodes[out].dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let extent = dims[axis];
    let mut dx = vec![S::zero(); t.nodes[x.0].data.len()];
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        let src = o * len * inner;
        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    t.accumulate(x, dx);
}

pub(crate) fn concat_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], xs: &[Var], axis: usize) {
    let base_dims = t.nodes[xs[0].0].dims.clone();
    let outer: usize = base_dims[..axis].iter().product();
    let inner: usize = base_dims[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|&v| t.nodes[v.0].dims[axis]).sum();
    let mut offset = 0usize;
    for &v in xs {
        let extent = t.nodes[v.0].dims[axis];
        if t.needs(v) {
            let mut dv = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                dv.extend_from_slice(&g[base..base + extent * inner]);
            }
            t.accumulate(v, dv);
        }
        offset += extent;
    }
}

pub(crate) fn window_gather_bwd<S: Scalar>(
    t: &mut Tape<S>,
    g: &[S],
    x: Var,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let dims = t.nodes[x.0].dims.clone();
    let (n, k, h, w, d) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let ph = (h + 2 * pad - kh) / stride + 1;
    let pw = (w + 2 * pad - kw) / stride + 1;
    let mut dx = vec![S::zero(); t.nodes[x.0].data.len()];
    let mut o = 0usize;
    for ni in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                for ki in 0..k {
                    for dy in 0..kh {
                        let y = (py * stride + dy) as isize - pad as isize;
                        for dx_k in 0..kw {
                            let xx = (px * stride + dx_k) as isize - pad as isize;
                            if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                                let base =
                                    (((ni * k + ki) * h + y as usize) * w + xx as usize) * d;
                                for di in 0..d {
                                    dx[base + di] = dx[base + di] + g[o + di];
                                }
                            }
                            o += d;
                        }
                    }
                }
            }
        }
    }
    t.accumulate(x, dx);
}

pub(crate) fn gather_class_bwd<S: Scalar>(
    t: &mut Tape<S>,
    out: usize,
    g: &[S],
    x: Var,
    idx: &[usize],
) {
    let _ = out;
    let dims = t.nodes[x.0].dims.clone();
    let c = dims[1];
    let inner: usize = dims[2..].iter().product();
    let mut dx = vec![S::zero(); t.nodes[x.0].data.len()];
    for (ni, &ci) in idx.iter().enumerate() {
        let dst = (ni * c + ci) * inner;
        let src = ni * inner;
        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
    }
    t.accumulate(x, dx);
}
