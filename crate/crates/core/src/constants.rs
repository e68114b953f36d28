//! Frozen numerical constants shared across modules.

/// Gronwall constant `K` of the payoff second-moment estimate.
///
/// For `dP = b dt + sigma dw` with `b^2 + sigma^2 <= l2^2 (1 + P^2)`,
/// the function `m(t) = E[P(t)^2]` satisfies
///
/// ```text
/// m'(t) <= 2 E|P b| + E[sigma^2]
///       <= E[P^2] + E[b^2] + E[sigma^2]
///       <= (1 + l2^2) m(t) + l2^2,
/// ```
///
/// so by Gronwall's inequality, over a horizon `T`,
///
/// ```text
/// m(t) <= (m(s) + l2^2 T) e^{(1 + l2^2) T}
///      <= K (1 + P_s^2) e^{K T}    with    K = (1 + l2^2) max(1, T).
/// ```
pub fn gronwall_constant(l2: f64, horizon: f64) -> f64 {
    (1.0 + l2 * l2) * horizon.max(1.0)
}

/// Slack multiplier on Monte Carlo standard errors used by the
/// statistical comparisons throughout the verification harnesses.
pub const MC_SE_SLACK: f64 = 4.0;

/// Leading constant of the first-order scheme-error model used when a
/// comparison needs a discretization tolerance.
pub const SCHEME_TOL_C1: f64 = 1.0;

/// Discretization tolerance for comparisons against a grid solved to the
/// given ladder tolerance: the Cauchy tolerance plus a first-order
/// `dx + dt` term.
pub fn scheme_tolerance(ladder_tol: f64, dx_max: f64, dt: f64) -> f64 {
    ladder_tol + SCHEME_TOL_C1 * (dx_max + dt)
}
