//! Closed-form reference solutions for tests and acceptance runs.
//!
//! Each oracle is the unique fixed point of its problem's Picard map;
//! derivations live in docs/oracles.md. Only cases with analytic laws are
//! admitted, so no expected value here is ever invented.

/// Fixed point for `mu = 0`, `sigma = I`, `g = |x|^2`, `f = 0`:
/// `u(t, x) = |x|^2 + d (T - t)`.
pub fn heat_quadratic(t: f64, x: &[f64], t_end: f64) -> f64 {
    let norm2: f64 = x.iter().map(|a| a * a).sum();
    norm2 + x.len() as f64 * (t_end - t)
}

/// Fixed point for `f(t, x, v) = c v` given the no-nonlinearity expectation
/// `base = E[g(X_T)]`: `u(t, x) = e^(c (T - t)) base`. Solves the scalar
/// flow `u(t) = base + c * integral_t^T u(s) ds`.
pub fn linear_f_duhamel(c: f64, t: f64, t_end: f64, base_expectation: f64) -> f64 {
    (c * (t_end - t)).exp() * base_expectation
}

/// Fixed point for `mu = 0`, `sigma = I`, `g = exp(<a, x>)`, `f = 0`:
/// `u(t, x) = exp(<a, x> + |a|^2 (T - t) / 2)` (Gaussian moment generating
/// function).
pub fn gaussian_exponential_moment(a: &[f64], t: f64, x: &[f64], t_end: f64) -> f64 {
    let inner: f64 = a.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
    let a2: f64 = a.iter().map(|p| p * p).sum();
    (inner + 0.5 * a2 * (t_end - t)).exp()
}
