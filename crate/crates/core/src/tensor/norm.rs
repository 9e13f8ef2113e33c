//! Batch normalization over `[N, C, H, W]` with running statistics.

use alloc::vec;
use alloc::vec::Vec;

use super::{shape_err, Op, Tape, TensorError, Var};
use crate::scalar::Scalar;

/// Running mean/variance buffers kept outside the tape; updated in training
/// mode (momentum on the old value), read in eval mode.
#[derive(Clone, Debug)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![S::zero(); channels], var: vec![S::one(); channels] }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<S: Scalar> Tape<S> {
    /// Batch normalization. In training mode normalizes with the batch
    /// statistics over (N, H, W) and, when `stats` is given, folds them into
    /// the running buffers. In eval mode normalizes with the running
    /// statistics, which are then required.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&mut BnStats<S>>,
        training: bool,
    ) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].dims.clone();
        if xd.len() != 4 {
            return Err(shape_err!("batchnorm2d expects rank-4 input, got {:?}", xd));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        if self.nodes[gamma.0].dims != [c] || self.nodes[beta.0].dims != [c] {
            return Err(shape_err!("batchnorm2d gamma/beta must both have dims [{c}]"));
        }
        let count = n * h * w;
        let eps = S::from_f64(BN_EPS);
        let (mean, var): (Vec<S>, Vec<S>) = if training {
            if count < 2 {
                return Err(TensorError::DegenerateBatch { count });
            }
            let src = &self.nodes[x.0].data;
            let inv = S::one() / S::from_usize(count);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut acc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        acc = acc + src[base + p];
                    }
                }
                mean[ci] = acc * inv;
                let mut vacc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        let d = src[base + p] - mean[ci];
                        vacc = vacc + d * d;
                    }
                }
                var[ci] = vacc * inv;
            }
            if let Some(run) = stats {
                let m = S::from_f64(BN_MOMENTUM);
                let rest = S::one() - m;
                for ci in 0..c {
                    run.mean[ci] = run.mean[ci] * m + mean[ci] * rest;
                    run.var[ci] = run.var[ci] * m + var[ci] * rest;
                }
            }
            (mean, var)
        } else {
            let run = stats.ok_or_else(|| {
                shape_err!("batchnorm2d eval mode requires running statistics")
            })?;
            if run.mean.len() != c {
                return Err(shape_err!(
                    "running statistics cover {} channels, input has {c}",
                    run.mean.len()
                ));
            }
            (run.mean.clone(), run.var.clone())
        };

        let src = &self.nodes[x.0].data;
        let gdat = &self.nodes[gamma.0].data;
        let bdat = &self.nodes[beta.0].data;
        let mut out = vec![S::zero(); src.len()];
        for ci in 0..c {
            let inv_std = S::one() / (var[ci] + eps).sqrt();
            let (gc, bc, mc) = (gdat[ci], bdat[ci], mean[ci]);
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    out[base + p] = (src[base + p] - mc) * inv_std * gc + bc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xd,
            out,
            needs,
            Op::BatchNorm { x, gamma, beta, eps, mean, var, training },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_bwd<S: Scalar>(
    t: &mut Tape<S>,
    g: &[S],
    x: Var,
    gamma: Var,
    beta: Var,
    eps: S,
    mean: &[S],
    var: &[S],
    training: bool,
) {
    let xd = t.nodes[x.0].dims.clone();
    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
    let plane = h * w;
    let count = S::from_usize(n * plane);
    let src = &t.nodes[x.0].data;
    let gdat = &t.nodes[gamma.0].data;

    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dx = vec![S::zero(); src.len()];
    for ci in 0..c {
        let inv_std = S::one() / (var[ci] + eps).sqrt();
        let mc = mean[ci];
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for p in 0..plane {
                let xhat = (src[base + p] - mc) * inv_std;
                sum_g = sum_g + g[base + p];
                sum_gx = sum_gx + g[base + p] * xhat;
            }
        }
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let gc = gdat[ci];
        if training {
            // dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat))
            let mg = sum_g / count;
            let mgx = sum_gx / count;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    let xhat = (src[base + p] - mc) * inv_std;
                    dx[base + p] = gc * inv_std * (g[base + p] - mg - xhat * mgx);
                }
            }
        } else {
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    dx[base + p] = gc * inv_std * g[base + p];
                }
            }
        }
    }
    t.accumulate(x, dx);
    t.accumulate(gamma, dgamma);
    t.accumulate(beta, dbeta);
}
