//! Central-difference verification of tape gradients.

use super::params::ParamSet;
use super::tape::{NodeId, Tape};
use super::NumGradError;

/// Compares an analytic gradient against central differences of `eval` around
/// `point`. Returns the worst coordinate's error, measured as
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn fd_compare(
    analytic: &[f64],
    eval: impl Fn(&[f64]) -> f64,
    point: &[f64],
    h: f64,
) -> Result<f64, NumGradError> {
    assert_eq!(analytic.len(), point.len(), "gradient/point length mismatch");
    assert!(h > 0.0, "step size must be positive");
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(&x);
        x[i] = orig - h;
        let fm = eval(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumGradError::NonFiniteEval { index: i });
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs `build` once to get the analytic gradient at `point` via backward,
/// then checks it against central differences coordinate by coordinate.
/// `build` receives a fresh tape and the leaf holding the current point and
/// must return a scalar node.
pub fn fd_check(
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
    point: &[f64],
    h: f64,
) -> Result<f64, NumGradError> {
    let mut set = ParamSet::new();
    set.insert("x", vec![point.len()], point.to_vec(), true);
    let mut tape = Tape::new();
    let leaf = tape.leaf(&set, "x");
    let out = build(&mut tape, leaf);
    assert_eq!(tape.value(out).len(), 1, "fd_check objective must be scalar");
    tape.backward(out, &mut set)?;
    let analytic = set.get("x").grad.clone();
    let eval = |x: &[f64]| {
        let mut probe = ParamSet::new();
        probe.insert("x", vec![x.len()], x.to_vec(), false);
        let mut t = Tape::new();
        let leaf = t.leaf(&probe, "x");
        let out = build(&mut t, leaf);
        t.scalar(out)
    };
    fd_compare(&analytic, eval, point, h)
}
