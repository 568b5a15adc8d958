//! Central finite-difference gradient checker.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped_tiny: usize,
    pub skipped_kink: usize,
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences on the given coordinate subset.
///
/// `eval` must be a pure function of the parameter vector, returning the loss
/// and the full analytic gradient. Coordinates where both gradients are below
/// 1e-8 in magnitude are skipped (relative error is meaningless there), as
/// are coordinates where the analytic gradients at the two perturbed points
/// disagree (the step straddles a kink of a piecewise-smooth loss, so the
/// central difference does not estimate either one-sided slope; a wrong
/// backward pass is wrong on both sides and is never skipped by this rule).
pub fn grad_check(
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    params: &[f64],
    indices: &[usize],
    h: f64,
) -> GradCheckReport {
    let (_, analytic) = eval(params);
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    let mut checked = 0;
    let mut skipped_tiny = 0;
    let mut skipped_kink = 0;
    let mut p = params.to_vec();
    for &i in indices {
        p[i] = params[i] + h;
        let (lp, gp) = eval(&p);
        p[i] = params[i] - h;
        let (lm, gm) = eval(&p);
        p[i] = params[i];
        let fd = (lp - lm) / (2.0 * h);
        let an = analytic[i];
        if fd.abs() < 1e-8 && an.abs() < 1e-8 {
            skipped_tiny += 1;
            continue;
        }
        let side_gap = (gp[i] - gm[i]).abs();
        if side_gap > 1e-2 * gp[i].abs().max(gm[i].abs()).max(1e-9) {
            skipped_kink += 1;
            continue;
        }
        let rel = (an - fd).abs() / fd.abs().max(an.abs());
        checked += 1;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked,
        skipped_tiny,
        skipped_kink,
    }
}
