//! Central finite-difference gradient checking.
//!
//! Re-evaluates a scalar loss under slot-wise perturbations; never touches
//! the tape, so it stays an independent oracle for backward-pass results.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every storage
/// slot of `x` (for complex tensors slots alternate real/imaginary, matching
/// the layout of a reverse-mode gradient).
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f32>,
    x: &Tensor,
    step: f32,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0f64; x.slots()];
    for i in 0..x.slots() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fp = f(&plus)? as f64;
        let fm = f(&minus)? as f64;
        grad[i] = (fp - fm) / (2.0 * step as f64);
    }
    Ok(grad)
}

/// Asserts that `analytic` matches the finite-difference gradient of `f` at
/// `x` to a relative tolerance, scaled by the gradient magnitude.
pub fn assert_grad_close(
    f: &mut dyn FnMut(&Tensor) -> Result<f32>,
    x: &Tensor,
    analytic: &Tensor,
    step: f32,
    rel_tol: f64,
    what: &str,
) {
    let numeric = finite_difference_grad(f, x, step).unwrap_or_else(|e| {
        panic!("{what}: finite-difference evaluation failed: {e}");
    });
    assert_eq!(
        analytic.slots(),
        numeric.len(),
        "{what}: gradient slot count mismatch"
    );
    // Scale by the largest gradient entry so tiny components do not demand
    // impossible relative accuracy of the difference quotient.
    let scale = numeric
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.iter()).enumerate() {
        let err = (a as f64 - n).abs() / scale;
        assert!(
            err < rel_tol,
            "{what}: slot {i}: analytic {a} vs numeric {n} (scaled err {err:.3e} > {rel_tol:.0e})"
        );
    }
}
