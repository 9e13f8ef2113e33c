//! 2-D convolution, transposed convolution, and bilinear upsampling on NCHW
//! tensors. Convolutions lower to im2col + GEMM; the backward passes reuse the
//! same lowering, so transposed convolution is exactly the adjoint of conv2d.

use alloc::vec;
use alloc::vec::Vec;

use super::par::for_each_chunk_mut;
use super::{shape_err, Op, Tape, TensorError, Var};
use crate::scalar::Scalar;

/// out spatial extent for a convolution axis.
#[inline]
pub(crate) fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Lower one image `[c, h, w]` into columns `[c*kh*kw, oh*ow]`.
fn im2col<S: Scalar>(x: &[S], geo: &ConvGeom, cols: &mut [S]) {
    let ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow } = *geo;
    let patch = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * patch;
                for py in 0..oh {
                    let y = (py * stride + dy) as isize - pad as isize;
                    let dst = row + py * ow;
                    if y < 0 || y as usize >= h {
                        cols[dst..dst + ow].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_row = (ci * h + y as usize) * w;
                    for px in 0..ow {
                        let xx = (px * stride + dx) as isize - pad as isize;
                        cols[dst + px] = if xx >= 0 && (xx as usize) < w {
                            x[src_row + xx as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter columns back onto an image, accumulating overlaps.
fn col2im<S: Scalar>(cols: &[S], geo: &ConvGeom, x: &mut [S]) {
    let ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow } = *geo;
    let patch = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * patch;
                for py in 0..oh {
                    let y = (py * stride + dy) as isize - pad as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    let dst_row = (ci * h + y as usize) * w;
                    for px in 0..ow {
                        let xx = (px * stride + dx) as isize - pad as isize;
                        if xx >= 0 && (xx as usize) < w {
                            let dst = dst_row + xx as usize;
                            x[dst] = x[dst] + cols[row + py * ow + px];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// 2-D convolution: input `[N, C, H, W]`, weight `[F, C, kh, kw]`,
    /// optional bias `[F]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].dims.clone();
        let wd = self.nodes[w.0].dims.clone();
        if xd.len() != 4 || wd.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input/weight, got {:?}/{:?}", xd, wd));
        }
        let (n, c, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
        let (f, wc, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if wc != c {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {c} channels, weight expects {wc}"
            ));
        }
        if kh > h + 2 * pad || kw > wid + 2 * pad || stride == 0 {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} stride {stride} does not fit padded input {}x{}",
                h + 2 * pad,
                wid + 2 * pad
            ));
        }
        if let Some(bv) = b {
            if self.nodes[bv.0].dims != [f] {
                return Err(shape_err!(
                    "conv2d bias dims {:?} do not match {f} filters",
                    self.nodes[bv.0].dims
                ));
            }
        }
        let geo = ConvGeom {
            c,
            h,
            w: wid,
            kh,
            kw,
            stride,
            pad,
            oh: conv_out(h, kh, stride, pad),
            ow: conv_out(wid, kw, stride, pad),
        };
        let (oh, ow) = (geo.oh, geo.ow);
        let patch = oh * ow;
        let ckk = c * kh * kw;
        let xdata = &self.nodes[x.0].data;
        let wdata = &self.nodes[w.0].data;
        let bdata: Option<&[S]> = b.map(|bv| self.nodes[bv.0].data.as_slice());
        let mut out = vec![S::zero(); n * f * patch];
        for_each_chunk_mut(&mut out, f * patch, |ni, out_n| {
            let mut cols = vec![S::zero(); ckk * patch];
            im2col(&xdata[ni * c * h * wid..(ni + 1) * c * h * wid], &geo, &mut cols);
            unsafe {
                S::gemm(
                    f,
                    ckk,
                    patch,
                    S::one(),
                    wdata.as_ptr(),
                    cols.as_ptr(),
                    S::zero(),
                    out_n.as_mut_ptr(),
                );
            }
            if let Some(bias) = bdata {
                for fi in 0..f {
                    let row = &mut out_n[fi * patch..(fi + 1) * patch];
                    row.iter_mut().for_each(|v| *v = *v + bias[fi]);
                }
            }
        });
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(vec![n, f, oh, ow], out, needs, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed 2-D convolution: input `[N, C, H, W]`, weight
    /// `[C, F, kh, kw]`, output spatial extent `(H-1)*stride - 2*pad + kh`.
    /// This is the adjoint of `conv2d` with the same geometry.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].dims.clone();
        let wd = self.nodes[w.0].dims.clone();
        if xd.len() != 4 || wd.len() != 4 {
            return Err(shape_err!(
                "conv_transpose2d expects rank-4 input/weight, got {:?}/{:?}",
                xd,
                wd
            ));
        }
        let (n, c, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
        let (wc, f, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if wc != c {
            return Err(shape_err!(
                "conv_transpose2d channel mismatch: input has {c} channels, weight expects {wc}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv_transpose2d stride must be >= 1"));
        }
        let oh_i = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
        let ow_i = ((wid - 1) * stride + kw) as isize - 2 * pad as isize;
        if oh_i <= 0 || ow_i <= 0 {
            return Err(shape_err!("conv_transpose2d output would be empty"));
        }
        let (oh, ow) = (oh_i as usize, ow_i as usize);
        if let Some(bv) = b {
            if self.nodes[bv.0].dims != [f] {
                return Err(shape_err!(
                    "conv_transpose2d bias dims {:?} do not match {f} filters",
                    self.nodes[bv.0].dims
                ));
            }
        }
        // conv view: "input" is the (f, oh, ow) output, "output" the (h, wid) grid
        let geo = ConvGeom { c: f, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wid };
        let patch = h * wid;
        let fkk = f * kh * kw;
        let xdata = &self.nodes[x.0].data;
        let wt = transpose_matrix(&self.nodes[w.0].data, c, fkk);
        let bdata: Option<&[S]> = b.map(|bv| self.nodes[bv.0].data.as_slice());
        let mut out = vec![S::zero(); n * f * oh * ow];
        for_each_chunk_mut(&mut out, f * oh * ow, |ni, out_n| {
            let mut cols = vec![S::zero(); fkk * patch];
            // cols = W^T [fkk, c] x X_n [c, h*wid]
            unsafe {
                S::gemm(
                    fkk,
                    c,
                    patch,
                    S::one(),
                    wt.as_ptr(),
                    xdata[ni * c * patch..(ni + 1) * c * patch].as_ptr(),
                    S::zero(),
                    cols.as_mut_ptr(),
                );
            }
            col2im(&cols, &geo, out_n);
            if let Some(bias) = bdata {
                for fi in 0..f {
                    let row = &mut out_n[fi * oh * ow..(fi + 1) * oh * ow];
                    row.iter_mut().for_each(|v| *v = *v + bias[fi]);
                }
            }
        });
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(vec![n, f, oh, ow], out, needs, Op::ConvT2d { x, w, b, stride, pad }))
    }

    /// Bilinear 2x upsampling (align-corners-false) of `[N, C, H, W]`.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].dims.clone();
        if xd.len() != 4 {
            return Err(shape_err!("upsample expects rank-4 input, got {:?}", xd));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); n * c * oh * ow];
        let taps_y = bilinear_taps::<S>(h);
        let taps_x = bilinear_taps::<S>(w);
        for_each_chunk_mut(&mut out, oh * ow, |plane, out_p| {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = taps_x[ox];
                    let one = S::one();
                    let v = src[base + y0 * w + x0] * (one - wy) * (one - wx)
                        + src[base + y0 * w + x1] * (one - wy) * wx
                        + src[base + y1 * w + x0] * wy * (one - wx)
                        + src[base + y1 * w + x1] * wy * wx;
                    out_p[oy * ow + ox] = v;
                }
            }
        });
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], out, needs, Op::Upsample2x { x }))
    }
}

/// Source taps and lerp weight for each output coordinate of a 2x bilinear
/// upsample with output pixel centers at half-integer source coordinates.
fn bilinear_taps<S: Scalar>(extent: usize) -> Vec<(usize, usize, S)> {
    let mut taps = Vec::with_capacity(2 * extent);
    for o in 0..2 * extent {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let floor = num_traits::Float::floor(src);
        // clamp: when floor < 0 both taps read index 0
        let (i0, i1, wfrac) = if floor < 0.0 {
            (0, 0, 0.0)
        } else {
            let i0 = (floor as usize).min(extent - 1);
            (i0, (i0 + 1).min(extent - 1), src - floor)
        };
        taps.push((i0, i1, S::from_f64(wfrac)));
    }
    taps
}

fn transpose_matrix<S: Scalar>(m: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

pub(crate) fn conv2d_bwd<S: Scalar>(
    t: &mut Tape<S>,
    out: usize,
    g: &[S],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) {
    let xd = t.nodes[x.0].dims.clone();
    let wd = t.nodes[w.0].dims.clone();
    let od = t.nodes[out].dims.clone();
    let (n, c, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
    let (f, _, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (oh, ow) = (od[2], od[3]);
    let patch = oh * ow;
    let ckk = c * kh * kw;
    let geo = ConvGeom { c, h, w: wid, kh, kw, stride, pad, oh, ow };

    if t.needs(w) {
        // dW[f, ckk] = sum_n g_n [f, patch] x cols_n^T [patch, ckk]
        let xdata = &t.nodes[x.0].data;
        let mut dw = vec![S::zero(); f * ckk];
        let mut cols = vec![S::zero(); ckk * patch];
        for ni in 0..n {
            im2col(&xdata[ni * c * h * wid..(ni + 1) * c * h * wid], &geo, &mut cols);
            let colst = transpose_matrix(&cols, ckk, patch);
            unsafe {
                S::gemm(
                    f,
                    patch,
                    ckk,
                    S::one(),
                    g[ni * f * patch..(ni + 1) * f * patch].as_ptr(),
                    colst.as_ptr(),
                    S::one(),
                    dw.as_mut_ptr(),
                );
            }
        }
        t.accumulate(w, dw);
    }
    if t.needs(x) {
        let wdata = &t.nodes[w.0].data;
        let wt = transpose_matrix(wdata, f, ckk);
        let mut dx = vec![S::zero(); n * c * h * wid];
        for_each_chunk_mut(&mut dx, c * h * wid, |ni, dx_n| {
            let mut dcols = vec![S::zero(); ckk * patch];
            unsafe {
                S::gemm(
                    ckk,
                    f,
                    patch,
                    S::one(),
                    wt.as_ptr(),
                    g[ni * f * patch..(ni + 1) * f * patch].as_ptr(),
                    S::zero(),
                    dcols.as_mut_ptr(),
                );
            }
            col2im(&dcols, &geo, dx_n);
        });
        t.accumulate(x, dx);
    }
    if let Some(bv) = b {
        if t.needs(bv) {
            let mut db = vec![S::zero(); f];
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * patch;
                    for p in 0..patch {
                        db[fi] = db[fi] + g[base + p];
                    }
                }
            }
            t.accumulate(bv, db);
        }
    }
}

pub(crate) fn conv_transpose2d_bwd<S: Scalar>(
    t: &mut Tape<S>,
    out: usize,
    g: &[S],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) {
    let xd = t.nodes[x.0].dims.clone();
    let wd = t.nodes[w.0].dims.clone();
    let od = t.nodes[out].dims.clone();
    let (n, c, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
    let (_, f, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (oh, ow) = (od[2], od[3]);
    let patch = h * wid;
    let fkk = f * kh * kw;
    // same conv view as the forward pass
    let geo = ConvGeom { c: f, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wid };

    if t.needs(x) {
        // dX_n [c, patch] = W [c, fkk] x im2col(g_n) [fkk, patch]
        let wdata = &t.nodes[w.0].data;
        let mut dx = vec![S::zero(); n * c * patch];
        for_each_chunk_mut(&mut dx, c * patch, |ni, dx_n| {
            let mut gcols = vec![S::zero(); fkk * patch];
            im2col(&g[ni * f * oh * ow..(ni + 1) * f * oh * ow], &geo, &mut gcols);
            unsafe {
                S::gemm(
                    c,
                    fkk,
                    patch,
                    S::one(),
                    wdata.as_ptr(),
                    gcols.as_ptr(),
                    S::zero(),
                    dx_n.as_mut_ptr(),
                );
            }
        });
        t.accumulate(x, dx);
    }
    if t.needs(w) {
        let xdata = &t.nodes[x.0].data;
        let mut dw = vec![S::zero(); c * fkk];
        let mut gcols = vec![S::zero(); fkk * patch];
        for ni in 0..n {
            im2col(&g[ni * f * oh * ow..(ni + 1) * f * oh * ow], &geo, &mut gcols);
            let gcolst = transpose_matrix(&gcols, fkk, patch);
            unsafe {
                S::gemm(
                    c,
                    patch,
                    fkk,
                    S::one(),
                    xdata[ni * c * patch..(ni + 1) * c * patch].as_ptr(),
                    gcolst.as_ptr(),
                    S::one(),
                    dw.as_mut_ptr(),
                );
            }
        }
        t.accumulate(w, dw);
    }
    if let Some(bv) = b {
        if t.needs(bv) {
            let opatch = oh * ow;
            let mut db = vec![S::zero(); f];
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * opatch;
                    for p in 0..opatch {
                        db[fi] = db[fi] + g[base + p];
                    }
                }
            }
            t.accumulate(bv, db);
        }
    }
}

pub(crate) fn upsample2x_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var) {
    let xd = t.nodes[x.0].dims.clone();
    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let taps_y = bilinear_taps::<S>(h);
    let taps_x = bilinear_taps::<S>(w);
    let mut dx = vec![S::zero(); n * c * h * w];
    for_each_chunk_mut(&mut dx, h * w, |plane, dx_p| {
        let gbase = plane * oh * ow;
        let one = S::one();
        for oy in 0..oh {
            let (y0, y1, wy) = taps_y[oy];
            for ox in 0..ow {
                let (x0, x1, wx) = taps_x[ox];
                let gv = g[gbase + oy * ow + ox];
                dx_p[y0 * w + x0] = dx_p[y0 * w + x0] + gv * (one - wy) * (one - wx);
                dx_p[y0 * w + x1] = dx_p[y0 * w + x1] + gv * (one - wy) * wx;
                dx_p[y1 * w + x0] = dx_p[y1 * w + x0] + gv * wy * (one - wx);
                dx_p[y1 * w + x1] = dx_p[y1 * w + x1] + gv * wy * wx;
            }
        }
    });
    t.accumulate(x, dx);
}
