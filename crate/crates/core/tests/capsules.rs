//! Capsule layer contracts: vote geometry, EM routing behavior, masking, and
//! differentiability at micro scale.

use capsflow_core::capsules::{
    class_scores, compute_votes, em_routing, mask_pose, primary_capsules, CapsuleField,
    RoutingParams,
};
use capsflow_core::gradcheck::{check_gradients, CheckLeaf};
use capsflow_core::rng::Rng;
use capsflow_core::tensor::{Tape, TensorError, Var};

fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn identity4() -> Vec<f64> {
    let mut m = vec![0.0; 16];
    for i in 0..4 {
        m[i * 4 + i] = 1.0;
    }
    m
}

fn make_field(
    t: &mut Tape<f64>,
    rng: &mut Rng,
    n: usize,
    k: usize,
    h: usize,
    w: usize,
) -> CapsuleField {
    let poses = t.leaf(randv(rng, n * k * h * w * 16), &[n, k, h, w, 16], true).unwrap();
    let acts_raw: Vec<f64> = (0..n * k * h * w).map(|_| rng.uniform(0.05, 0.95)).collect();
    let activations = t.leaf(acts_raw, &[n, k, h, w], true).unwrap();
    CapsuleField { poses, activations, types: k, h, w }
}

fn default_params(t: &mut Tape<f64>, k_out: usize) -> RoutingParams<f64> {
    let beta_a = t.constant(0.0, &[k_out]);
    let beta_u = t.constant(0.0, &[k_out]);
    RoutingParams::new(beta_a, beta_u, vec![1.0, 2.0, 3.0], 1e-8).unwrap()
}

#[test]
fn primary_capsules_shapes_and_ranges() {
    // full-scale geometry: 32x32x256 features -> 16 types on a 16x16 grid
    let mut t: Tape<f32> = Tape::new();
    let features = t.constant(0.3, &[1, 256, 32, 32]);
    let w = t.constant(0.01, &[16 * 17, 256, 3, 3]);
    let b = t.constant(0.0, &[16 * 17]);
    let field = primary_capsules(&mut t, features, w, b, 16).unwrap();
    assert_eq!(t.dims(field.poses), &[1, 16, 16, 16, 16]);
    assert_eq!(t.dims(field.activations), &[1, 16, 16, 16]);
    assert!(t.data(field.activations).iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn primary_capsules_zero_weights() {
    let mut t: Tape<f64> = Tape::new();
    let mut rng = Rng::from_seed(1);
    let features = t.leaf(randv(&mut rng, 8 * 8 * 8), &[1, 8, 8, 8], false).unwrap();
    let w = t.constant(0.0, &[2 * 17, 8, 3, 3]);
    let b = t.constant(0.0, &[2 * 17]);
    let field = primary_capsules(&mut t, features, w, b, 2).unwrap();
    assert!(t.data(field.poses).iter().all(|&p| p == 0.0));
    assert!(t.data(field.activations).iter().all(|&a| a == 0.5));
}

#[test]
fn identity_votes_reproduce_child_poses() {
    let mut t: Tape<f64> = Tape::new();
    let mut rng = Rng::from_seed(2);
    let field = make_field(&mut t, &mut rng, 1, 3, 2, 2);
    // 2x2 receptive field covering the whole grid, no padding
    let mut w = Vec::new();
    for _ in 0..3 * 2 * 2 * 2 {
        w.extend_from_slice(&identity4());
    }
    let wv = t.leaf(w, &[3, 2, 2, 2, 4, 4], false).unwrap();
    let votes = compute_votes(&mut t, &field, wv, 1, 0).unwrap();
    assert_eq!(t.dims(votes.votes), &[1, 1, 1, 2, 12, 16]);
    // child order is (k_in, dy, dx); poses are [n, k, y, x, 16]
    let vd = t.data(votes.votes);
    let pd = t.data(field.poses);
    for ko in 0..2 {
        for ki in 0..3 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let child = (ki * 2 + dy) * 2 + dx;
                    let vote = &vd[(ko * 12 + child) * 16..(ko * 12 + child) * 16 + 16];
                    let pose = &pd[((ki * 2 + dy) * 2 + dx) * 16..((ki * 2 + dy) * 2 + dx) * 16 + 16];
                    assert_eq!(vote, pose);
                }
            }
        }
    }
}

#[test]
fn vote_grid_16_to_6_under_7x7_stride2_pad1() {
    let mut t: Tape<f32> = Tape::new();
    let poses = t.constant(0.1, &[1, 16, 16, 16, 16]);
    let acts = t.constant(0.5, &[1, 16, 16, 16]);
    let field = CapsuleField { poses, activations: acts, types: 16, h: 16, w: 16 };
    let w = t.constant(0.05, &[16, 16, 7, 7, 4, 4]);
    let votes = compute_votes(&mut t, &field, w, 2, 1).unwrap();
    assert_eq!((votes.parent_h, votes.parent_w), (6, 6));
    assert_eq!(t.dims(votes.votes), &[1, 6, 6, 16, 16 * 49, 16]);
}

#[test]
fn votes_match_direct_loop_oracle() {
    let mut t: Tape<f64> = Tape::new();
    let mut rng = Rng::from_seed(3);
    let (k_in, k_out, h, w, kh, kw, stride, pad) = (1usize, 2usize, 2usize, 2usize, 2, 2, 1, 1);
    let field = make_field(&mut t, &mut rng, 1, k_in, h, w);
    let wdata = randv(&mut rng, k_in * k_out * kh * kw * 16);
    let wv = t.leaf(wdata.clone(), &[k_in, k_out, kh, kw, 4, 4], false).unwrap();
    let votes = compute_votes(&mut t, &field, wv, stride, pad).unwrap();
    let (ph, pw) = (votes.parent_h, votes.parent_w);
    assert_eq!((ph, pw), (3, 3));
    let poses = t.data(field.poses).to_vec();
    let got = t.data(votes.votes).to_vec();
    let nc = k_in * kh * kw;
    for py in 0..ph {
        for px in 0..pw {
            for ko in 0..k_out {
                for ki in 0..k_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (py * stride + dy) as isize - pad as isize;
                            let x = (px * stride + dx) as isize - pad as isize;
                            let child = (ki * kh + dy) * kw + dx;
                            let base = (((py * pw + px) * k_out + ko) * nc + child) * 16;
                            let mut want = [0.0f64; 16];
                            if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                                let pbase = ((ki * h + y as usize) * w + x as usize) * 16;
                                let wbase = (((ki * k_out + ko) * kh + dy) * kw + dx) * 16;
                                for i in 0..4 {
                                    for j in 0..4 {
                                        let mut acc = 0.0;
                                        for kk in 0..4 {
                                            acc += poses[pbase + i * 4 + kk]
                                                * wdata[wbase + kk * 4 + j];
                                        }
                                        want[i * 4 + j] = acc;
                                    }
                                }
                            }
                            for c in 0..16 {
                                assert!(
                                    (got[base + c] - want[c]).abs() < 1e-6,
                                    "vote mismatch at py={py} px={px} ko={ko} child={child}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn scaling_weights_scales_votes() {
    let mut rng = Rng::from_seed(4);
    let poses = randv(&mut rng, 2 * 3 * 3 * 16);
    let acts: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.uniform(0.1, 0.9)).collect();
    let wdata = randv(&mut rng, 2 * 2 * 2 * 2 * 16);
    let run = |scale: f64| {
        let mut t: Tape<f64> = Tape::new();
        let p = t.leaf(poses.clone(), &[1, 2, 3, 3, 16], false).unwrap();
        let a = t.leaf(acts.clone(), &[1, 2, 3, 3], false).unwrap();
        let field = CapsuleField { poses: p, activations: a, types: 2, h: 3, w: 3 };
        let w: Vec<f64> = wdata.iter().map(|v| v * scale).collect();
        let wv = t.leaf(w, &[2, 2, 2, 2, 4, 4], false).unwrap();
        let votes = compute_votes(&mut t, &field, wv, 1, 0).unwrap();
        t.data(votes.votes).to_vec()
    };
    let base = run(1.0);
    let scaled = run(2.5);
    for (b, s) in base.iter().zip(&scaled) {
        assert!((s - 2.5 * b).abs() < 1e-9);
    }
}

#[test]
fn em_degenerate_cluster_returns_common_vote() {
    // all children cast the same vote with activation 1 -> parent pose == vote
    let mut rng = Rng::from_seed(5);
    let vote = randv(&mut rng, 16);
    for iters in [1usize, 3] {
        let mut t: Tape<f64> = Tape::new();
        let mut votes = Vec::new();
        for _ in 0..2 * 4 {
            votes.extend_from_slice(&vote);
        }
        let v = t.leaf(votes, &[2, 4, 16], false).unwrap();
        let a = t.constant(1.0, &[4]);
        let beta_a = t.constant(0.0, &[2]);
        let beta_u = t.constant(0.0, &[2]);
        let params = RoutingParams::new(
            beta_a,
            beta_u,
            (0..iters).map(|i| (i + 1) as f64).collect(),
            1e-8,
        )
        .unwrap();
        let out = em_routing(&mut t, v, a, &params).unwrap();
        let poses = t.data(out.poses);
        for ko in 0..2 {
            for c in 0..16 {
                assert!((poses[ko * 16 + c] - vote[c]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn em_assignments_sum_to_one_and_activations_bounded() {
    let mut rng = Rng::from_seed(6);
    let mut t: Tape<f64> = Tape::new();
    let (k_out, nc) = (3usize, 5usize);
    let v = t.leaf(randv(&mut rng, 2 * k_out * nc * 16), &[2, k_out, nc, 16], false).unwrap();
    let acts: Vec<f64> = (0..2 * nc).map(|_| rng.uniform(0.1, 0.9)).collect();
    let a = t.leaf(acts, &[2, nc], false).unwrap();
    let params = default_params(&mut t, k_out);
    let out = em_routing(&mut t, v, a, &params).unwrap();
    assert_eq!(out.assignments.len(), 2); // E-steps between 3 iterations
    for &r in &out.assignments {
        let data = t.data(r);
        assert_eq!(t.dims(r), &[2, k_out, nc]);
        for b in 0..2 {
            for ci in 0..nc {
                let mut s = 0.0;
                for ko in 0..k_out {
                    s += data[(b * k_out + ko) * nc + ci];
                }
                assert!((s - 1.0).abs() < 1e-6, "assignment row sums to {s}");
            }
        }
    }
    assert!(t.data(out.activations).iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn em_single_iteration_is_uniform_weighted_mean() {
    let mut rng = Rng::from_seed(7);
    let (k_out, nc) = (2usize, 4usize);
    let votes = randv(&mut rng, k_out * nc * 16);
    let acts: Vec<f64> = (0..nc).map(|_| rng.uniform(0.2, 0.9)).collect();
    let mut t: Tape<f64> = Tape::new();
    let v = t.leaf(votes.clone(), &[k_out, nc, 16], false).unwrap();
    let a = t.leaf(acts.clone(), &[nc], false).unwrap();
    let beta_a = t.constant(0.0, &[k_out]);
    let beta_u = t.constant(0.0, &[k_out]);
    let params = RoutingParams::new(beta_a, beta_u, vec![1.0], 1e-8).unwrap();
    let out = em_routing(&mut t, v, a, &params).unwrap();
    // with uniform R the mean reduces to sum(a_i V_i) / sum(a_i)
    let total: f64 = acts.iter().sum();
    for ko in 0..k_out {
        for c in 0..16 {
            let mut num = 0.0;
            for ci in 0..nc {
                num += acts[ci] * votes[(ko * nc + ci) * 16 + c];
            }
            let want = num / total;
            let got = t.data(out.poses)[ko * 16 + c];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn em_parent_pose_is_convex_combination_of_votes() {
    let mut rng = Rng::from_seed(8);
    let (k_out, nc) = (2usize, 6usize);
    let mut t: Tape<f64> = Tape::new();
    let votes = randv(&mut rng, k_out * nc * 16);
    let v = t.leaf(votes.clone(), &[k_out, nc, 16], false).unwrap();
    let acts: Vec<f64> = (0..nc).map(|_| rng.uniform(0.1, 0.9)).collect();
    let a = t.leaf(acts, &[nc], false).unwrap();
    let params = default_params(&mut t, k_out);
    let out = em_routing(&mut t, v, a, &params).unwrap();
    for ko in 0..k_out {
        for c in 0..16 {
            let column: Vec<f64> = (0..nc).map(|ci| votes[(ko * nc + ci) * 16 + c]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = t.data(out.poses)[ko * 16 + c];
            assert!(got >= lo - 1e-6 && got <= hi + 1e-6, "{got} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn em_gradients_match_finite_differences() {
    let mut rng = Rng::from_seed(9);
    let (k_out, nc) = (2usize, 4usize);
    let leaves = vec![
        CheckLeaf::new("votes", randv(&mut rng, k_out * nc * 16), &[k_out, nc, 16]),
        CheckLeaf::new(
            "acts",
            (0..nc).map(|_| rng.uniform(0.2, 0.8)).collect(),
            &[nc],
        ),
        CheckLeaf::new("beta_a", randv(&mut rng, k_out), &[k_out]),
        CheckLeaf::new("beta_u", randv(&mut rng, k_out), &[k_out]),
    ];
    let report = check_gradients(
        |t, v| {
            let params = RoutingParams::new(v[2], v[3], vec![1.0, 2.0, 3.0], 1e-8)?;
            let out = em_routing(t, v[0], v[1], &params)?;
            let p2 = t.square(out.poses);
            let pose_term = t.mean_all(p2);
            let act_term = t.mean_all(out.activations);
            t.add(pose_term, act_term)
        },
        &leaves,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn class_permutation_symmetry() {
    // permuting child capsule types together with the matching weight slices
    // leaves the routed class outputs unchanged up to summation order
    let mut rng = Rng::from_seed(10);
    let (k_in, k_out, h, w) = (3usize, 2usize, 2usize, 2usize);
    let poses = randv(&mut rng, k_in * h * w * 16);
    let acts: Vec<f64> = (0..k_in * h * w).map(|_| rng.uniform(0.1, 0.9)).collect();
    let wdata = randv(&mut rng, k_in * k_out * 16); // 1x1 receptive field
    let perm = [2usize, 0, 1];

    let run = |poses: Vec<f64>, acts: Vec<f64>, wdata: Vec<f64>| {
        let mut t: Tape<f64> = Tape::new();
        let p = t.leaf(poses, &[1, k_in, h, w, 16], false).unwrap();
        let a = t.leaf(acts, &[1, k_in, h, w], false).unwrap();
        let field = CapsuleField { poses: p, activations: a, types: k_in, h, w };
        let wv = t.leaf(wdata, &[k_in, k_out, 1, 1, 4, 4], false).unwrap();
        let votes = compute_votes(&mut t, &field, wv, 1, 0).unwrap();
        let params = default_params(&mut t, k_out);
        let out = em_routing(&mut t, votes.votes, votes.activations, &params).unwrap();
        (t.data(out.poses).to_vec(), t.data(out.activations).to_vec())
    };

    let base = run(poses.clone(), acts.clone(), wdata.clone());
    // apply the permutation to child types and the matching W slices
    let mut p2 = vec![0.0; poses.len()];
    let mut a2 = vec![0.0; acts.len()];
    let mut w2 = vec![0.0; wdata.len()];
    for new_k in 0..k_in {
        let old_k = perm[new_k];
        p2[new_k * h * w * 16..(new_k + 1) * h * w * 16]
            .copy_from_slice(&poses[old_k * h * w * 16..(old_k + 1) * h * w * 16]);
        a2[new_k * h * w..(new_k + 1) * h * w]
            .copy_from_slice(&acts[old_k * h * w..(old_k + 1) * h * w]);
        w2[new_k * k_out * 16..(new_k + 1) * k_out * 16]
            .copy_from_slice(&wdata[old_k * k_out * 16..(old_k + 1) * k_out * 16]);
    }
    let permuted = run(p2, a2, w2);
    for (x, y) in base.0.iter().zip(&permuted.0) {
        assert!((x - y).abs() < 1e-6);
    }
    for (x, y) in base.1.iter().zip(&permuted.1) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn class_scores_and_masking() {
    let mut t: Tape<f64> = Tape::new();
    let mut acts = vec![0.1; 3 * 2 * 2];
    acts[2 * 2..2 * 4].iter_mut().for_each(|v| *v = 0.9); // class 1 hot
    acts[0..4].iter_mut().for_each(|v| *v = 0.3); // class 0 constant 0.3
    let a = t.leaf(acts, &[1, 3, 2, 2], false).unwrap();
    let mut rng = Rng::from_seed(11);
    let poses = t.leaf(randv(&mut rng, 3 * 2 * 2 * 16), &[1, 3, 2, 2, 16], true).unwrap();
    let field = CapsuleField { poses, activations: a, types: 3, h: 2, w: 2 };
    let scores = class_scores(&mut t, &field).unwrap();
    assert_eq!(t.dims(scores), &[1, 3]);
    assert!((t.data(scores)[0] - 0.3).abs() < 1e-12);
    let preds = capsflow_core::capsules::argmax_rows(t.data(scores), 3);
    assert_eq!(preds, vec![1]);

    let masked = mask_pose(&mut t, &field, &[1]).unwrap();
    assert_eq!(t.dims(masked), &[1, 2, 2, 16]);
    // gradients flow only through the selected class
    let s = t.square(masked);
    let loss = t.mean_all(s);
    t.backward(loss).unwrap();
    let g = t.grad(poses).unwrap();
    let per_class = 2 * 2 * 16;
    assert!(g[..per_class].iter().all(|&v| v == 0.0));
    assert!(g[per_class..2 * per_class].iter().any(|&v| v != 0.0));
    assert!(g[2 * per_class..].iter().all(|&v| v == 0.0));

    let err = mask_pose(&mut t, &field, &[7]).unwrap_err();
    assert!(matches!(err, TensorError::IndexOutOfRange { index: 7, extent: 3 }));
}

#[test]
fn class_scores_invariant_under_spatial_permutation() {
    let mut rng = Rng::from_seed(12);
    let acts: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
    let score = |a: &[f64]| {
        let mut t: Tape<f64> = Tape::new();
        let av = t.leaf(a.to_vec(), &[1, 2, 3, 3], false).unwrap();
        let poses = t.constant(0.0, &[1, 2, 3, 3, 16]);
        let f = CapsuleField { poses, activations: av, types: 2, h: 3, w: 3 };
        let s = class_scores(&mut t, &f).unwrap();
        t.data(s).to_vec()
    };
    let base = score(&acts);
    let mut rotated = acts.clone();
    for k in 0..2 {
        for i in 0..9 {
            rotated[k * 9 + i] = acts[k * 9 + (i + 4) % 9];
        }
    }
    let perm = score(&rotated);
    for (x, y) in base.iter().zip(&perm) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn routing_params_validation() {
    let mut t: Tape<f64> = Tape::new();
    let b: Var = t.constant(0.0, &[2]);
    assert!(RoutingParams::<f64>::new(b, b, vec![], 1e-8).is_err());
    assert!(RoutingParams::<f64>::new(b, b, vec![1.0, 0.5], 1e-8).is_err());
    assert!(RoutingParams::<f64>::new(b, b, vec![-1.0], 1e-8).is_err());
    assert!(RoutingParams::<f64>::new(b, b, vec![1.0, 2.0, 3.0], 1e-8).is_ok());
}
