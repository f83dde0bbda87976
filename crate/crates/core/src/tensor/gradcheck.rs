//! Central finite-difference gradient verification.

use super::{NodeId, Tape, Tensor};

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate. Returns the max over
/// coordinates of `|g_fd − g_ad| / max(1, |g_fd|, |g_ad|)`.
///
/// `f` receives a fresh tape and the node holding `x`, and must return a
/// scalar node. Panics if the output is not scalar.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let mut tape = Tape::new();
    let xid = tape.param(x);
    let out = f(&mut tape, xid);
    assert_eq!(
        tape.value(out).len(),
        1,
        "grad_check requires a scalar-valued function"
    );
    let grads = tape.backward(out);
    let g_ad = grads
        .wrt(xid)
        .expect("function output does not depend on x")
        .to_vec();

    let eval = |values: &[f64]| -> f64 {
        let probe = Tensor::new(x.shape().to_vec(), values.to_vec());
        let mut t = Tape::new();
        let id = t.constant(&probe);
        let y = f(&mut t, id);
        t.value(y)[0]
    };

    let mut max_err: f64 = 0.0;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let g_fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = 1.0_f64.max(g_fd.abs()).max(g_ad[i].abs());
        max_err = max_err.max((g_fd - g_ad[i]).abs() / denom);
    }
    max_err
}
