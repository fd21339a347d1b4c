//! Finite-difference gradient verification.
//!
//! This module is deliberately independent of the tape: it re-evaluates a
//! caller-supplied forward closure with perturbed inputs and compares the
//! resulting central differences against analytically computed gradients.
//! It exists so tests (and the acceptance suite) can certify every
//! differentiable operation without trusting the code under test.
//!
//! Central differences have truncation error O(h²) and roundoff error
//! O(ε/h); `DEFAULT_STEP` balances the two for values of order one. Do not
//! evaluate at kinks (relu at exactly zero) — the two-sided estimate is
//! meaningless there, and callers are expected to sample inputs away from
//! them.

/// Step size for central differences, tuned for f64 and O(1) values.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
///
/// `f` must be a pure function of its argument; it is called `2 * x.len()`
/// times.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + step;
        let plus = f(&probe);
        probe[i] = original - step;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Elementwise relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps near-zero entries from
/// amplifying finite-difference roundoff into spurious failures.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let floor = 1e-6;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: checks that the analytic gradient of `f` at `x`
/// stays within `tol` relative error of central differences.
///
/// Returns the observed maximum relative error so callers can report it.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tol: f64,
) -> Result<f64, String> {
    let numeric = finite_difference_gradient(f, x, DEFAULT_STEP);
    let err = max_relative_error(analytic, &numeric);
    if err < tol {
        Ok(err)
    } else {
        let worst = analytic
            .iter()
            .zip(&numeric)
            .enumerate()
            .max_by(|(_, (a1, n1)), (_, (a2, n2))| {
                let e1 = (*a1 - *n1).abs() / a1.abs().max(n1.abs()).max(1e-6);
                let e2 = (*a2 - *n2).abs() / a2.abs().max(n2.abs()).max(1e-6);
                e1.total_cmp(&e2)
            })
            .map(|(i, (a, n))| format!("index {i}: analytic {a}, numeric {n}"))
            .unwrap_or_default();
        Err(format!("gradient mismatch: max relative error {err:.3e} (tol {tol:.1e}); worst at {worst}"))
    }
}
