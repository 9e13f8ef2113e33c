//! Fully-connected layers and broadcast-batched 4x4 matrix products (the
//! pose-times-weight "vote" primitive).

use alloc::vec;

use super::broadcast::{broadcast_dims, broadcast_strides, reduce_to_shape};
use super::{shape_err, Op, Tape, TensorError, Var};
use crate::scalar::Scalar;

impl<S: Scalar> Tape<S> {
    /// `y = x @ w (+ b)` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].dims.clone();
        let wd = self.nodes[w.0].dims.clone();
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] {
            return Err(shape_err!("linear dims mismatch: x {:?} vs w {:?}", xd, wd));
        }
        let (bsz, fin) = (xd[0], xd[1]);
        let fout = wd[1];
        if let Some(bv) = b {
            if self.nodes[bv.0].dims != [fout] {
                return Err(shape_err!(
                    "linear bias dims {:?} do not match {fout} outputs",
                    self.nodes[bv.0].dims
                ));
            }
        }
        let mut out = vec![S::zero(); bsz * fout];
        unsafe {
            S::gemm(
                bsz,
                fin,
                fout,
                S::one(),
                self.nodes[x.0].data.as_ptr(),
                self.nodes[w.0].data.as_ptr(),
                S::zero(),
                out.as_mut_ptr(),
            );
        }
        if let Some(bv) = b {
            let bias = &self.nodes[bv.0].data;
            for r in 0..bsz {
                for o in 0..fout {
                    out[r * fout + o] = out[r * fout + o] + bias[o];
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(vec![bsz, fout], out, needs, Op::Linear { x, w, b }))
    }

    /// Batched matrix product on trailing `[4, 4]` dims with numpy-style
    /// broadcasting of the leading dims.
    pub fn matmul4(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ad = self.nodes[a.0].dims.clone();
        let bd = self.nodes[b.0].dims.clone();
        if ad.len() < 2 || bd.len() < 2 || ad[ad.len() - 2..] != [4, 4] || bd[bd.len() - 2..] != [4, 4]
        {
            return Err(shape_err!(
                "matmul4 expects trailing [4, 4] dims, got {:?} and {:?}",
                ad,
                bd
            ));
        }
        let lead = broadcast_dims(&ad[..ad.len() - 2], &bd[..bd.len() - 2])?;
        let count: usize = lead.iter().product();
        let sa = broadcast_strides(&ad[..ad.len() - 2], &lead);
        let sb = broadcast_strides(&bd[..bd.len() - 2], &lead);
        let adata = &self.nodes[a.0].data;
        let bdata = &self.nodes[b.0].data;
        let mut out = vec![S::zero(); count * 16];
        let mut idx = vec![0usize; lead.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for li in 0..count {
            mm4(&adata[off_a * 16..], &bdata[off_b * 16..], &mut out[li * 16..li * 16 + 16]);
            odometer_step(&lead, &mut idx, &mut [(&sa, &mut off_a), (&sb, &mut off_b)]);
        }
        let mut out_dims = lead;
        out_dims.push(4);
        out_dims.push(4);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_dims, out, needs, Op::Matmul4 { a, b }))
    }
}

/// c = a @ b for row-major 4x4 blocks.
#[inline]
fn mm4<S: Scalar>(a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = S::zero();
            for k in 0..4 {
                acc = acc + a[i * 4 + k] * b[k * 4 + j];
            }
            c[i * 4 + j] = acc;
        }
    }
}

/// c += a @ b^T for row-major 4x4 blocks.
#[inline]
fn mm4_abt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = S::zero();
            for k in 0..4 {
                acc = acc + a[i * 4 + k] * b[j * 4 + k];
            }
            c[i * 4 + j] = c[i * 4 + j] + acc;
        }
    }
}

/// c += a^T @ b for row-major 4x4 blocks.
#[inline]
fn mm4_atb_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = S::zero();
            for k in 0..4 {
                acc = acc + a[k * 4 + i] * b[k * 4 + j];
            }
            c[i * 4 + j] = c[i * 4 + j] + acc;
        }
    }
}

/// Advance a multi-index over `dims`, updating each (strides, offset) pair.
#[inline]
fn odometer_step(dims: &[usize], idx: &mut [usize], offs: &mut [(&[usize], &mut usize)]) {
    for ax in (0..dims.len()).rev() {
        idx[ax] += 1;
        for (s, off) in offs.iter_mut() {
            **off += s[ax];
        }
        if idx[ax] < dims[ax] {
            return;
        }
        for (s, off) in offs.iter_mut() {
            **off -= s[ax] * dims[ax];
        }
        idx[ax] = 0;
    }
}

pub(crate) fn linear_bwd<S: Scalar>(t: &mut Tape<S>, g: &[S], x: Var, w: Var, b: Option<Var>) {
    let xd = t.nodes[x.0].dims.clone();
    let wd = t.nodes[w.0].dims.clone();
    let (bsz, fin) = (xd[0], xd[1]);
    let fout = wd[1];
    if t.needs(x) {
        // dx [B, in] = g [B, out] x w^T [out, in]
        let wdata = &t.nodes[w.0].data;
        let mut wt = vec![S::zero(); fin * fout];
        for i in 0..fin {
            for o in 0..fout {
                wt[o * fin + i] = wdata[i * fout + o];
            }
        }
        let mut dx = vec![S::zero(); bsz * fin];
        unsafe {
            S::gemm(bsz, fout, fin, S::one(), g.as_ptr(), wt.as_ptr(), S::zero(), dx.as_mut_ptr());
        }
        t.accumulate(x, dx);
    }
    if t.needs(w) {
        // dw [in, out] = x^T [in, B] x g [B, out]
        let xdata = &t.nodes[x.0].data;
        let mut xt = vec![S::zero(); fin * bsz];
        for r in 0..bsz {
            for i in 0..fin {
                xt[i * bsz + r] = xdata[r * fin + i];
            }
        }
        let mut dw = vec![S::zero(); fin * fout];
        unsafe {
            S::gemm(fin, bsz, fout, S::one(), xt.as_ptr(), g.as_ptr(), S::zero(), dw.as_mut_ptr());
        }
        t.accumulate(w, dw);
    }
    if let Some(bv) = b {
        if t.needs(bv) {
            let mut db = vec![S::zero(); fout];
            for r in 0..bsz {
                for o in 0..fout {
                    db[o] = db[o] + g[r * fout + o];
                }
            }
            t.accumulate(bv, db);
        }
    }
}

pub(crate) fn matmul4_bwd<S: Scalar>(t: &mut Tape<S>, out: usize, g: &[S], a: Var, b: Var) {
    let ad = t.nodes[a.0].dims.clone();
    let bd = t.nodes[b.0].dims.clone();
    let od = t.nodes[out].dims.clone();
    let lead = &od[..od.len() - 2];
    let count: usize = lead.iter().product();
    let sa = broadcast_strides(&ad[..ad.len() - 2], lead);
    let sb = broadcast_strides(&bd[..bd.len() - 2], lead);
    let a_broadcast = ad[..ad.len() - 2] != *lead;
    let b_broadcast = bd[..bd.len() - 2] != *lead;

    if t.needs(a) {
        // dA = g @ B^T, reduced over broadcast leading axes
        let bdata = &t.nodes[b.0].data;
        let full_len = if a_broadcast { count * 16 } else { t.nodes[a.0].data.len() };
        let mut da_full = vec![S::zero(); full_len];
        let mut idx = vec![0usize; lead.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for li in 0..count {
            let dst = if a_broadcast { li * 16 } else { off_a * 16 };
            mm4_abt_acc(&g[li * 16..], &bdata[off_b * 16..], &mut da_full[dst..dst + 16]);
            odometer_step(lead, &mut idx, &mut [(&sa, &mut off_a), (&sb, &mut off_b)]);
        }
        let da = if a_broadcast {
            let mut full_dims = lead.to_vec();
            full_dims.push(16);
            let mut tgt = ad[..ad.len() - 2].to_vec();
            tgt.push(16);
            reduce_to_shape(&da_full, &full_dims, &tgt)
        } else {
            da_full
        };
        t.accumulate(a, da);
    }
    if t.needs(b) {
        // dB = A^T @ g, reduced over broadcast leading axes
        let adata = &t.nodes[a.0].data;
        let full_len = if b_broadcast { count * 16 } else { t.nodes[b.0].data.len() };
        let mut db_full = vec![S::zero(); full_len];
        let mut idx = vec![0usize; lead.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for li in 0..count {
            let dst = if b_broadcast { li * 16 } else { off_b * 16 };
            mm4_atb_acc(&adata[off_a * 16..], &g[li * 16..], &mut db_full[dst..dst + 16]);
            odometer_step(lead, &mut idx, &mut [(&sa, &mut off_a), (&sb, &mut off_b)]);
        }
        let db = if b_broadcast {
            let mut full_dims = lead.to_vec();
            full_dims.push(16);
            let mut tgt = bd[..bd.len() - 2].to_vec();
            tgt.push(16);
            reduce_to_shape(&db_full, &full_dims, &tgt)
        } else {
            db_full
        };
        t.accumulate(b, db);
    }
}
