//! Central finite-difference verification of recorded gradients.
//!
//! The checker rebuilds the forward graph from scratch for every probe, so it
//! is independent of the backward implementation it validates. Run it with
//! `S = f64` for tight tolerances; `f32` only supports loose smoke checks.

use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, Var};

/// One leaf to differentiate: initial values plus dims.
#[derive(Clone)]
pub struct CheckLeaf<S> {
    pub name: &'static str,
    pub data: Vec<S>,
    pub dims: Vec<usize>,
}

impl<S: Scalar> CheckLeaf<S> {
    pub fn new(name: &'static str, data: Vec<S>, dims: &[usize]) -> Self {
        CheckLeaf { name, data, dims: dims.to_vec() }
    }
}

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_leaf: &'static str,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Relative error with a floor that keeps near-zero gradient pairs comparable.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs())).max(floor)
}

/// Compare recorded gradients against central finite differences.
///
/// `build` must record the loss for the given leaf values; it runs `2 * numel + 1`
/// times. `h_base` scales per-element steps as `h = h_base * (1 + |theta|)`;
/// `floor` is the denominator floor of the relative error.
pub fn check_gradients<S, F>(
    mut build: F,
    leaves: &[CheckLeaf<S>],
    h_base: f64,
    floor: f64,
) -> Result<CheckReport, TensorError>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var, TensorError>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|l| tape.leaf(l.data.clone(), &l.dims, true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").iter().map(|x| (*x).to_f64()).collect())
        .collect();
    drop(tape);

    let eval = |build: &mut F, values: &[Vec<S>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves
            .iter()
            .zip(values.iter())
            .map(|(l, v)| tape.leaf(v.clone(), &l.dims, false))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.item(loss).to_f64())
    };

    let base: Vec<Vec<S>> = leaves.iter().map(|l| l.data.clone()).collect();
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_leaf: "",
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.data.len() {
            let theta = leaf.data[ei].to_f64();
            let h = h_base * (1.0 + theta.abs());
            let mut plus = base.clone();
            plus[li][ei] = S::from_f64(theta + h);
            let lp = eval(&mut build, &plus)?;
            let mut minus = base.clone();
            minus[li][ei] = S::from_f64(theta - h);
            let lm = eval(&mut build, &minus)?;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[li][ei];
            let e = rel_err(a, numeric, floor);
            report.probes += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_leaf = leaf.name;
                report.worst_index = ei;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
