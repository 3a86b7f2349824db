use super::tape::{NodeId, Tape};
use crate::error::Result;
use crate::matrix::Matrix;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates left out because the function has a kink within `2·step`
    /// of the point, where no finite difference is meaningful.
    pub skipped: Vec<usize>,
}

/// Gradients smaller than this are compared absolutely: central differences
/// on O(1) functions carry about 1e-11 of rounding noise, so relative error
/// on smaller values measures the noise, not the gradient.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` with a fourth-order central difference of `f` for
/// every coordinate of `point`.
///
/// The estimate is the Richardson combination `(4·D(h) − D(2h)) / 3` of the
/// central differences `D`. When `D(h)` and `D(2h)` disagree by more than a
/// smooth function allows, a kink lies inside the stencil and the coordinate
/// is listed in `skipped` instead of being scored.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheckReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut p = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: analytic.first().copied().unwrap_or(0.0),
        skipped: Vec::new(),
    };
    let mut at = |p: &mut Vec<f64>, i: usize, x: f64| {
        let orig = p[i];
        p[i] = x;
        let v = f(p);
        p[i] = orig;
        v
    };
    for i in 0..p.len() {
        let x = p[i];
        let d1 = (at(&mut p, i, x + step) - at(&mut p, i, x - step)) / (2.0 * step);
        let d2 = (at(&mut p, i, x + 2.0 * step) - at(&mut p, i, x - 2.0 * step)) / (4.0 * step);
        let numeric = (4.0 * d1 - d2) / 3.0;
        if (d1 - d2).abs() > 1e-6 + 1e-4 * d1.abs().max(d2.abs()) {
            report.skipped.push(i);
            continue;
        }
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Grad-checks a scalar function built on a tape from `inputs`.
///
/// `build` receives one leaf per input and returns a `1 x 1` node. With
/// `fault` set the tape's fault hook is armed for the analytic pass only.
pub fn check_tape_fn(
    inputs: &[Matrix],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    step: f64,
    fault: bool,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    if fault {
        tape.inject_fault();
    }
    let leaves: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out, 1.0)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|&l| grads.wrt(l).into_vec())
        .collect();
    let point: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
    let eval = |p: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let leaves: Vec<NodeId> = shapes
            .iter()
            .map(|&(r, c)| {
                let m = Matrix::from_parts(r, c, p[offset..offset + r * c].to_vec());
                offset += r * c;
                tape.leaf(m)
            })
            .collect();
        match build(&mut tape, &leaves) {
            Ok(out) => tape.value(out).as_slice()[0],
            Err(_) => f64::NAN,
        }
    };
    Ok(grad_check(eval, &point, &analytic, step))
}
