//! Small dense-tensor toolkit: row-major f64 tensors, a reverse-mode tape,
//! parameter collections, and Adam.

pub mod adam;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{seeded_rng, truncated_normal, uniform_init, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Disagreement between an analytic derivative and a central finite-difference
/// estimate, as a relative error with a floored denominator.
///
/// With an O(1) loss and step h = 1e-5, the difference quotient carries
/// roundoff of roughly machine-eps / h ≈ 1e-11 in absolute terms, so for true
/// gradients much below 1e-4 a pure relative comparison would demand more
/// precision than f64 arithmetic can deliver. Flooring the denominator at
/// 1e-4 turns the check into an absolute comparison (|a − n| ≤ tol · 1e-4)
/// exactly in that regime and leaves resolvable gradients on a strict
/// relative scale.
pub fn gradient_check_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}
