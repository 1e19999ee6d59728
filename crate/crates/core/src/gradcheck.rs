//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates a loss closure at perturbed inputs, so it is
//! independent of whatever analytic path produced the gradient under test.
//! Used by the unit and acceptance suites for every loss in the crate.

/// Default perturbation step.
pub const STEP: f64 = 1e-5;

/// Default tolerance on [`relative_error`].
pub const TOLERANCE: f64 = 1e-4;

/// Scale floor in the relative-error denominator. Gradient entries below the
/// floor are compared absolutely at `tol * floor`, which keeps the check
/// meaningful where the true derivative is ~0 and the central difference is
/// dominated by roundoff (~1e-10).
pub const SCALE_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, SCALE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(SCALE_FLOOR)
}

/// Central differences of `f` with respect to every entry of every input
/// block: `(f(x + h e) - f(x - h e)) / 2h`.
pub fn central_difference<F>(mut f: F, inputs: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|b| vec![0.0; b.len()]).collect();
    for (bi, block) in inputs.iter().enumerate() {
        for (ei, &orig) in block.iter().enumerate() {
            work[bi][ei] = orig + step;
            let up = f(&work);
            work[bi][ei] = orig - step;
            let down = f(&work);
            work[bi][ei] = orig;
            grads[bi][ei] = (up - down) / (2.0 * step);
        }
    }
    grads
}

/// Worst relative error between an analytic gradient and the central
/// differences of `f`. Panics on shape mismatch.
pub fn max_gradient_error<F>(f: F, inputs: &[Vec<f64>], analytic: &[Vec<f64>], step: f64) -> f64
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "gradient block count mismatch");
    let numeric = central_difference(f, inputs, step);
    let mut worst = 0.0f64;
    for (nb, ab) in numeric.iter().zip(analytic) {
        assert_eq!(nb.len(), ab.len(), "gradient block shape mismatch");
        for (&n, &a) in nb.iter().zip(ab) {
            worst = worst.max(relative_error(a, n));
        }
    }
    worst
}
