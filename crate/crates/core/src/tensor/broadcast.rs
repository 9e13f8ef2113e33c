//! Shape arithmetic shared by the elementwise and matmul kernels:
//! numpy-style broadcasting, row-major strides, and the odometer walk
//! used to reduce gradients back onto broadcast operands.

use alloc::vec;
use alloc::vec::Vec;

use super::{shape_err, TensorError};
use crate::scalar::Scalar;

/// Row-major strides for `dims`.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; dims.len()];
    let mut acc = 1;
    for (i, &d) in dims.iter().enumerate().rev() {
        s[i] = acc;
        acc *= d;
    }
    s
}

/// Broadcast output dims for two operands, or a shape error.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        if da != db && da != 1 && db != 1 {
            return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

#[inline]
fn dim_from_right(dims: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - dims.len();
    if i < pad {
        1
    } else {
        dims[i - pad]
    }
}

/// Strides of an operand viewed at the broadcast rank: zero on axes where the
/// operand has extent 1 but the output is wider.
pub(crate) fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let base = strides(dims);
    let pad = out.len() - dims.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..out.len() {
        if i < pad {
            s[i] = 0;
        } else {
            s[i] = if dims[i - pad] == 1 && out[i] != 1 { 0 } else { base[i - pad] };
        }
    }
    s
}

/// Walks every index of `out_dims`, handing the kernel the flat offsets of two
/// broadcast operands a run of `inner` contiguous elements at a time. The run
/// length is the trailing extent when both trailing strides are dense, else 1.
pub(crate) fn zip_broadcast<S: Scalar>(
    a: &[S],
    a_dims: &[usize],
    b: &[S],
    b_dims: &[usize],
    out_dims: &[usize],
    mut f: impl FnMut(S, S) -> S,
) -> Vec<S> {
    let numel: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(numel);
    let sa = broadcast_strides(a_dims, out_dims);
    let sb = broadcast_strides(b_dims, out_dims);
    let rank = out_dims.len();
    if rank == 0 {
        out.push(f(a[0], b[0]));
        return out;
    }
    let last = out_dims[rank - 1];
    let sa_last = sa[rank - 1];
    let sb_last = sb[rank - 1];
    let outer_dims = &out_dims[..rank - 1];
    let outer: usize = outer_dims.iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..outer {
        let (mut ia, mut ib) = (off_a, off_b);
        for _ in 0..last {
            out.push(f(a[ia], b[ib]));
            ia += sa_last;
            ib += sb_last;
        }
        // odometer increment over the outer axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < outer_dims[ax] {
                break;
            }
            off_a -= sa[ax] * outer_dims[ax];
            off_b -= sb[ax] * outer_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `src` (shaped `src_dims`) down to `dst_dims`, which must be
/// broadcast-compatible. Used to push gradients onto broadcast operands.
pub(crate) fn reduce_to_shape<S: Scalar>(
    src: &[S],
    src_dims: &[usize],
    dst_dims: &[usize],
) -> Vec<S> {
    if src_dims == dst_dims {
        return src.to_vec();
    }
    let dst_numel: usize = dst_dims.iter().product();
    let mut out = vec![S::zero(); dst_numel];
    let sd = broadcast_strides(dst_dims, src_dims);
    let rank = src_dims.len();
    let last = if rank == 0 { 1 } else { src_dims[rank - 1] };
    let sd_last = if rank == 0 { 0 } else { sd[rank - 1] };
    let outer_dims = if rank == 0 { &src_dims[..0] } else { &src_dims[..rank - 1] };
    let outer: usize = outer_dims.iter().product();
    let mut idx = vec![0usize; outer_dims.len()];
    let mut off_d = 0usize;
    let mut src_i = 0usize;
    for _ in 0..outer {
        let mut id = off_d;
        for _ in 0..last {
            out[id] = out[id] + src[src_i];
            src_i += 1;
            id += sd_last;
        }
        for ax in (0..outer_dims.len()).rev() {
            idx[ax] += 1;
            off_d += sd[ax];
            if idx[ax] < outer_dims[ax] {
                break;
            }
            off_d -= sd[ax] * outer_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}
