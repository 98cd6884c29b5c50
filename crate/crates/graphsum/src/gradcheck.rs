//! Central finite-difference gradient verification.
//!
//! The checker only ever calls the forward pass, so it stays independent of
//! the reverse-mode sweep it is used to validate. Losses are re-evaluated at
//! `x ± h` per coordinate: slow, exact enough at f64, and free of any shared
//! code path with [`crate::tensor::Tape::backward`].

/// Central finite differences of `loss` w.r.t. `values`, step `h`.
///
/// `loss` must be a pure function of the slice contents; `values` is restored
/// to its original state before returning.
pub fn central_diff<F>(values: &mut [f64], h: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; values.len()];
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = loss(values);
        values[i] = orig - h;
        let down = loss(values);
        values[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradient vectors.
///
/// The denominator is floored at `floor` so near-zero entries are compared
/// absolutely; finite differences carry O(1e-10) noise of their own.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
