//! Central-difference verification of reverse-mode gradients.

use super::{Tape, TensorId};
use crate::Result;

/// Relative error floor: coordinates where both analytic and numeric
/// gradients sit below this magnitude compare against the floor instead of
/// each other, so finite-difference roundoff noise on near-zero gradients
/// cannot dominate the report.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// A named parameter block fed to the closure under test.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        ParamSpec { name: name.into(), shape, data }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    /// Coordinates whose first estimate failed and were re-measured at a
    /// smaller step (relu kinks inside the difference window).
    pub refined_coords: usize,
    /// Max relative error observed within each parameter block.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` must construct the loss from scratch on the given tape; the
/// harness re-invokes it with perturbed parameter values, so it must be a
/// pure function of the tape leaves it is handed. Leaves arrive in the same
/// order as `params`. `max_coords_per_param` caps the finite-difference cost
/// for large blocks; coordinates are then chosen deterministically (the
/// largest-magnitude analytic gradient plus an even spread).
///
/// A coordinate that fails at `step` is re-measured at `step/16` and
/// `step/256` before it counts as a failure. Central differences are only
/// valid on smooth stretches; a relu pre-activation within `step` of zero
/// puts a kink inside the window and corrupts the estimate at a rate
/// proportional to the window size, while a wrong analytic gradient stays
/// wrong at every step size. Shrinking the window therefore separates the
/// two cases instead of masking either.
pub fn grad_check<F>(
    params: &[ParamSpec],
    step: f64,
    tol: f64,
    max_coords_per_param: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Vec<f64>]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(values) {
            ids.push(tape.leaf(v.clone(), p.shape.clone(), true)?);
        }
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();
    let (mut tape, ids, loss) = eval(&base)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        tol,
        worst_param: String::new(),
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        refined_coords: 0,
        per_param: Vec::with_capacity(params.len()),
    };

    let numeric_at = |pi: usize, c: usize, h: f64| -> Result<f64> {
        let mut plus = base.clone();
        plus[pi][c] += h;
        let (tp, _, lp) = eval(&plus)?;
        let mut minus = base.clone();
        minus[pi][c] -= h;
        let (tm, _, lm) = eval(&minus)?;
        Ok((tp.item(lp) - tm.item(lm)) / (2.0 * h))
    };

    for (pi, p) in params.iter().enumerate() {
        let coords = select_coords(&analytic[pi], max_coords_per_param);
        let mut param_max = 0.0f64;
        for &c in &coords {
            let a = analytic[pi][c];
            let rel_of = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let mut numeric = numeric_at(pi, c, step)?;
            let mut rel = rel_of(numeric);
            if rel > tol {
                report.refined_coords += 1;
                for shrink in [16.0, 256.0] {
                    numeric = numeric_at(pi, c, step / shrink)?;
                    rel = rel_of(numeric);
                    if rel <= tol {
                        break;
                    }
                }
            }
            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p.name.clone();
                report.worst_coord = c;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        report.per_param.push((p.name.clone(), param_max));
    }
    Ok(report)
}

fn select_coords(grad: &[f64], cap: Option<usize>) -> Vec<usize> {
    let n = grad.len();
    let m = cap.unwrap_or(n).min(n);
    if m == 0 || n == 0 {
        return Vec::new();
    }
    if m >= n {
        return (0..n).collect();
    }
    let mut picked: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    // The largest gradient coordinate is the one most worth trusting.
    let argmax = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    picked.push(argmax);
    picked.sort_unstable();
    picked.dedup();
    picked
}
