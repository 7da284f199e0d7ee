//! Finite-difference gradient checking.
//!
//! The analytic gradients produced by [`crate::tensor::Graph::backward`] are
//! validated against central finite differences computed in f64. Central
//! differences have O(h²) truncation error; with step 1e-5 and values of
//! order 1, the numeric gradient is accurate to roughly 1e-10 absolute,
//! which comfortably resolves the tolerances used here.
//!
//! Relative error uses a floored denominator so that near-zero gradient
//! entries (where any relative measure degenerates) are compared at an
//! absolute scale instead:
//! `rel(a, b) = |a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.

/// Central-difference step. Small enough for O(h²) truncation to vanish,
/// large enough that f64 cancellation noise (≈1e-11 at unit scale) stays
/// well under the tolerances.
pub const FD_STEP: f64 = 1e-5;

/// Per-operation tolerance on the relative error.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Tolerance for the end-to-end model loss gradient, where thousands of
/// accumulated operations add rounding on top of truncation.
pub const FULL_MODEL_TOLERANCE: f64 = 1e-3;

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Worst-case comparison between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest floored relative error over all coordinates.
    pub max_rel_err: f64,
    /// Coordinate where it occurred.
    pub worst_index: usize,
}

impl GradCheck {
    /// True when the worst relative error is within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central finite-difference gradient of `f` at `x`:
/// `g_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let saved = probe[i];
        probe[i] = saved + step;
        let up = f(&probe);
        probe[i] = saved - step;
        let down = f(&probe);
        probe[i] = saved;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Floored relative error between two gradients of equal length.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numeric.len()
    );
    let mut worst = GradCheck { max_rel_err: 0.0, worst_index: 0 };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        let rel = (a - n).abs() / denom;
        if rel > worst.max_rel_err {
            worst = GradCheck { max_rel_err: rel, worst_index: i };
        }
    }
    worst
}

/// Convenience: checks `analytic` against central differences of `f` at `x`.
pub fn check_against_fd<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_difference(f, x, step);
    compare_gradients(analytic, &numeric)
}
