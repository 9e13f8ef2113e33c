//! Matrix-capsule layers: primary capsules, convolutional vote computation,
//! and EM routing unrolled on the tape so gradients flow through every
//! iteration.

use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, TensorError, Var};

/// Capsule activations are logistic outputs, clamped one ulp-scale inside the
/// open interval so the strict (0,1) invariant survives saturation.
pub const ACTIVATION_MARGIN: f64 = 1e-6;

fn clamped_logistic<S: Scalar>(t: &mut Tape<S>, z: Var) -> Var {
    let a = t.logistic(z);
    let m = S::from_f64(ACTIVATION_MARGIN);
    t.clamp(a, m, S::one() - m)
}

/// A grid of capsules: poses `[N, K, H, W, 16]` (row-major 4x4 matrices) and
/// activations `[N, K, H, W]` in (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct CapsuleField {
    pub poses: Var,
    pub activations: Var,
    pub types: usize,
    pub h: usize,
    pub w: usize,
}

/// Per-layer routing inputs: learned logistic biases and the iteration
/// schedule of inverse temperatures.
pub struct RoutingParams<S> {
    /// `[K_out]` activation bias.
    pub beta_a: Var,
    /// `[K_out]` per-component cost bias.
    pub beta_u: Var,
    /// Inverse temperature per iteration; positive and non-decreasing.
    pub lambdas: Vec<S>,
    /// Variance floor.
    pub epsilon: S,
}

impl<S: Scalar> RoutingParams<S> {
    pub fn new(beta_a: Var, beta_u: Var, lambdas: Vec<S>, epsilon: S) -> Result<Self, TensorError> {
        if lambdas.is_empty() {
            return Err(shape_err!("routing needs at least one EM iteration"));
        }
        let mut prev = S::zero();
        for &l in &lambdas {
            if l <= S::zero() || l < prev {
                return Err(shape_err!("lambda schedule must be positive and non-decreasing"));
            }
            prev = l;
        }
        Ok(RoutingParams { beta_a, beta_u, lambdas, epsilon })
    }
}

/// Votes from a child field for one parent layer, after the per-pair pose
/// transform: `votes[n, py, px, k_out, child, :] = pose_child @ W[k_in, k_out, dy, dx]`
/// with `child = (k_in, dy, dx)` flattened. `activations` are the matching
/// child activations (zero for positions created by padding).
pub struct VoteSet {
    pub votes: Var,
    pub activations: Var,
    pub parent_h: usize,
    pub parent_w: usize,
    pub k_out: usize,
    pub children: usize,
}

/// Primary capsule layer: one strided convolution whose output channels split
/// into K blocks of 16 linear pose components plus K logistic activations.
pub fn primary_capsules<S: Scalar>(
    t: &mut Tape<S>,
    features: Var,
    weight: Var,
    bias: Var,
    types: usize,
) -> Result<CapsuleField, TensorError> {
    let wd = t.dims(weight).to_vec();
    if wd[0] != types * 17 {
        return Err(shape_err!(
            "primary capsule conv must emit {} channels for {types} types, got {}",
            types * 17,
            wd[0]
        ));
    }
    let y = t.conv2d(features, weight, Some(bias), 2, 1)?;
    let yd = t.dims(y).to_vec();
    let (n, h, w) = (yd[0], yd[2], yd[3]);
    let pose_flat = t.narrow(y, 1, 0, types * 16)?;
    let pose5 = t.reshape(pose_flat, &[n, types, 16, h, w])?;
    let poses = t.permute(pose5, &[0, 1, 3, 4, 2])?;
    let act_pre = t.narrow(y, 1, types * 16, types)?;
    let activations = clamped_logistic(t, act_pre);
    Ok(CapsuleField { poses, activations, types, h, w })
}

/// Transform child poses into votes for each parent position and type.
///
/// `weight` has dims `[K_in, K_out, kh, kw, 4, 4]` and is shared across
/// parent positions.
pub fn compute_votes<S: Scalar>(
    t: &mut Tape<S>,
    children: &CapsuleField,
    weight: Var,
    stride: usize,
    pad: usize,
) -> Result<VoteSet, TensorError> {
    let wd = t.dims(weight).to_vec();
    if wd.len() != 6 || wd[4] != 4 || wd[5] != 4 {
        return Err(shape_err!("vote weight must be [K_in, K_out, kh, kw, 4, 4], got {:?}", wd));
    }
    let (k_in, k_out, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    if k_in != children.types {
        return Err(shape_err!(
            "vote weight expects {k_in} child types, field has {}",
            children.types
        ));
    }
    let pd = t.dims(children.poses).to_vec();
    let n = pd[0];
    let (h, w) = (children.h, children.w);
    let children_per_window = k_in * kh * kw;

    let gathered = t.window_gather(children.poses, kh, kw, stride, pad)?;
    let gd = t.dims(gathered).to_vec();
    let (ph, pw) = (gd[1], gd[2]);
    let child_mats =
        t.reshape(gathered, &[n, ph, pw, 1, children_per_window, 4, 4])?;
    let w_perm = t.permute(weight, &[1, 0, 2, 3, 4, 5])?;
    let w_mats = t.reshape(w_perm, &[k_out, children_per_window, 4, 4])?;
    let votes44 = t.matmul4(child_mats, w_mats)?;
    let votes = t.reshape(votes44, &[n, ph, pw, k_out, children_per_window, 16])?;

    let acts5 = t.reshape(children.activations, &[n, k_in, h, w, 1])?;
    let acts_g = t.window_gather(acts5, kh, kw, stride, pad)?;
    let activations = t.reshape(acts_g, &[n, ph, pw, children_per_window])?;

    Ok(VoteSet { votes, activations, parent_h: ph, parent_w: pw, k_out, children: children_per_window })
}

/// Result of EM routing plus the assignment tensors after each E-step
/// (diagnostics; rows over parents sum to one by construction).
pub struct RoutingOutput {
    /// `[..., K_out, 16]` parent poses (final Gaussian means).
    pub poses: Var,
    /// `[..., K_out]` parent activations.
    pub activations: Var,
    /// Assignment `R` after each E-step, dims `[..., K_out, children]`.
    pub assignments: Vec<Var>,
}

/// Unrolled EM routing.
///
/// `votes` has dims `[..., K_out, children, 16]`, `child_acts`
/// `[..., children]`. Each iteration runs the M-step at its scheduled inverse
/// temperature; E-steps run between iterations. All arithmetic stays on the
/// tape, so the procedure is differentiable end to end.
pub fn em_routing<S: Scalar>(
    t: &mut Tape<S>,
    votes: Var,
    child_acts: Var,
    params: &RoutingParams<S>,
) -> Result<RoutingOutput, TensorError> {
    let vd = t.dims(votes).to_vec();
    if vd.len() < 3 || vd[vd.len() - 1] != 16 {
        return Err(shape_err!("votes must be [..., K_out, children, 16], got {:?}", vd));
    }
    let rank = vd.len();
    let k_out = vd[rank - 3];
    let children = vd[rank - 2];
    let lead = &vd[..rank - 3];
    let ad = t.dims(child_acts).to_vec();
    if ad[..ad.len() - 1] != *lead || ad[ad.len() - 1] != children {
        return Err(shape_err!(
            "child activations {:?} do not match votes {:?}",
            ad,
            vd
        ));
    }

    // shapes used for broadcasting
    let mut r_dims = lead.to_vec();
    r_dims.extend_from_slice(&[k_out, children]);
    let mut acts_b_dims = lead.to_vec();
    acts_b_dims.extend_from_slice(&[1, children]);
    let mut rh_dims = lead.to_vec();
    rh_dims.extend_from_slice(&[k_out, children, 1]);
    let child_axis = r_dims.len() - 1; // in [..., K, children]
    let h_axis = rank - 1; // in [..., K, children, 16]

    let acts_b = t.reshape(child_acts, &acts_b_dims)?;
    let beta_u_col = t.reshape(params.beta_u, &[k_out, 1, 1])?;
    let beta_a_col = t.reshape(params.beta_a, &[k_out, 1, 1])?;
    let ln_2pi = S::from_f64(core::f64::consts::TAU.ln());

    let mut assign = t.constant(S::one() / S::from_usize(k_out), &r_dims);
    let mut assignments = Vec::new();
    let mut mu = votes; // replaced by the first M-step
    let mut a_out = child_acts; // likewise
    let iters = params.lambdas.len();
    for (it, &lambda) in params.lambdas.iter().enumerate() {
        // M-step: Gaussian fit per parent, weighted by assignment * activation
        let r = t.mul(assign, acts_b)?;
        let r_sum = t.sum_axis(r, child_axis, true)?; // [..., K, 1]
        let r_col = t.reshape(r, &rh_dims)?;
        let mut rs_dims = rh_dims.clone();
        rs_dims[child_axis] = 1;
        let r_sum_col = t.reshape(r_sum, &rs_dims)?; // [..., K, 1, 1]
        let weighted = t.mul(r_col, votes)?;
        let mu_num = t.sum_axis(weighted, child_axis, true)?;
        mu = t.div(mu_num, r_sum_col)?; // [..., K, 1, 16]
        let diff = t.sub(votes, mu)?;
        let diff2 = t.square(diff);
        let wdiff2 = t.mul(r_col, diff2)?;
        let var_num = t.sum_axis(wdiff2, child_axis, true)?;
        let var_raw = t.div(var_num, r_sum_col)?;
        let sigma2 = t.add_scalar(var_raw, params.epsilon); // [..., K, 1, 16]
        let ln_s2 = t.ln(sigma2);
        let half_ln = t.scale(ln_s2, S::from_f64(0.5));
        let cost_h = t.add(half_ln, beta_u_col)?;
        let cost_sum = t.sum_axis(cost_h, h_axis, true)?; // [..., K, 1, 1]
        let cost = t.mul(cost_sum, r_sum_col)?;
        let gap = t.sub(beta_a_col, cost)?;
        let z = t.scale(gap, lambda);
        a_out = clamped_logistic(t, z);

        if it + 1 < iters {
            // E-step: posterior over parents in log space
            let two_sigma2 = t.scale(sigma2, S::from_f64(2.0));
            let quad = t.div(diff2, two_sigma2)?;
            let ln_norm = t.add_scalar(ln_s2, ln_2pi);
            let half_norm = t.scale(ln_norm, S::from_f64(0.5));
            let penalty = t.add(quad, half_norm)?; // [..., K, children, 16]
            let ln_p_h = t.neg(penalty);
            let ln_p = t.sum_axis(ln_p_h, h_axis, false)?; // [..., K, children]
            let neg_z = t.neg(z);
            let sp = t.softplus(neg_z);
            let ln_a = t.neg(sp); // ln(logistic(z)), stable
            let mut ln_a_dims = lead.to_vec();
            ln_a_dims.extend_from_slice(&[k_out, 1]);
            let ln_a_row = t.reshape(ln_a, &ln_a_dims)?;
            let logits = t.add(ln_p, ln_a_row)?;
            assign = t.softmax(logits, child_axis - 1)?; // over K_out
            assignments.push(assign);
        }
    }

    let mut pose_dims = lead.to_vec();
    pose_dims.extend_from_slice(&[k_out, 16]);
    let poses = t.reshape(mu, &pose_dims)?;
    let mut act_dims = lead.to_vec();
    act_dims.push(k_out);
    let activations = t.reshape(a_out, &act_dims)?;
    t.assert_finite(poses, "em_routing poses")?;
    t.assert_finite(activations, "em_routing activations")?;
    Ok(RoutingOutput { poses, activations, assignments })
}

/// Convolutional capsule layer: votes + EM routing, producing a parent field.
pub fn conv_capsules<S: Scalar>(
    t: &mut Tape<S>,
    children: &CapsuleField,
    weight: Var,
    stride: usize,
    pad: usize,
    params: &RoutingParams<S>,
) -> Result<CapsuleField, TensorError> {
    let votes = compute_votes(t, children, weight, stride, pad)?;
    let routed = em_routing(t, votes.votes, votes.activations, params)?;
    let n = t.dims(children.poses)[0];
    let (ph, pw, k_out) = (votes.parent_h, votes.parent_w, votes.k_out);
    // [N, PH, PW, K, 16] -> [N, K, PH, PW, 16]
    let poses = t.permute(routed.poses, &[0, 3, 1, 2, 4])?;
    let acts = t.permute(routed.activations, &[0, 3, 1, 2])?;
    debug_assert_eq!(t.dims(poses), &[n, k_out, ph, pw, 16]);
    Ok(CapsuleField { poses, activations: acts, types: k_out, h: ph, w: pw })
}

/// Per-class scores: spatial mean of the activation grid, `[N, C]`.
pub fn class_scores<S: Scalar>(
    t: &mut Tape<S>,
    field: &CapsuleField,
) -> Result<Var, TensorError> {
    t.mean_axes(field.activations, &[2, 3], false)
}

/// Index of the highest score per row of `[N, C]` data.
pub fn argmax_rows<S: Scalar>(scores: &[S], classes: usize) -> Vec<usize> {
    scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Select each sample's class pose grid: `[N, H, W, 16]`. Gradients flow only
/// through the selected class.
pub fn mask_pose<S: Scalar>(
    t: &mut Tape<S>,
    field: &CapsuleField,
    class_index: &[usize],
) -> Result<Var, TensorError> {
    for &ci in class_index {
        if ci >= field.types {
            return Err(TensorError::IndexOutOfRange { index: ci, extent: field.types });
        }
    }
    t.gather_class(field.poses, class_index)
}
