//! Pointwise nested Monte-Carlo realization of the Picard iteration.
//!
//! Where tensor grids are unaffordable (d > 3), the fixed point can still be
//! probed at a single `(t, x)`: the estimator recursively reproduces the
//! Picard iterates,
//!
//! ```text
//! U_0 = 0,
//! U_k(t, x) = mean_i g(X^i_T)
//!           + (T - t) * sum_q w_q * mean_j f(s_q, X^(j,q)_(s_q), U_(k-1)(s_q, X^(j,q)_(s_q))),
//! ```
//!
//! with `depth n` returning `U_(n+1)`, so depth 0 is the zero candidate,
//! depth 1 is a plain terminal-value estimate when `f` vanishes, and each
//! extra level buys one more Picard application. The time integral runs over
//! Gauss-Legendre nodes `s_q` in `[t, T]` (deterministic, exact on the
//! polynomial integrands produced by deterministic dynamics) while the space
//! directions stay Monte-Carlo with fresh counter-derived sub-streams per
//! recursive call.

use crate::expr::EvalEnv;
use crate::problem::ProblemSpec;
use crate::rng::{mix_key, BrownianDriver};
use crate::sde::{walk_path, WalkScratch};

use super::SolveError;

/// Gauss-Legendre abscissas/weights on [-1, 1], by point count 1..=5.
const GAUSS: [&[(f64, f64)]; 5] = [
    &[(0.0, 2.0)],
    &[
        (-0.5773502691896257, 1.0),
        (0.5773502691896257, 1.0),
    ],
    &[
        (-0.7745966692414834, 0.5555555555555556),
        (0.0, 0.8888888888888888),
        (0.7745966692414834, 0.5555555555555556),
    ],
    &[
        (-0.8611363115940526, 0.34785484513745385),
        (-0.3399810435848563, 0.6521451548625461),
        (0.3399810435848563, 0.6521451548625461),
        (0.8611363115940526, 0.34785484513745385),
    ],
    &[
        (-0.906179845938664, 0.23692688505618908),
        (-0.5384693101056831, 0.47862867049936647),
        (0.0, 0.5688888888888889),
        (0.5384693101056831, 0.47862867049936647),
        (0.906179845938664, 0.23692688505618908),
    ],
];

#[derive(Debug, Clone)]
pub struct NestedParams {
    /// Picard depth; the estimate carries `depth + 1` map applications.
    pub depth: usize,
    /// `(N_g, N_f)` per level, indexed from the top call; the last entry
    /// repeats for deeper levels.
    pub widths: Vec<(usize, usize)>,
    /// Euler steps per simulated leg.
    pub steps: usize,
    /// Abort once this many simulated steps have been spent.
    pub max_work: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct NestedEstimate {
    pub value: f64,
    /// Total simulated Euler steps.
    pub work: u64,
}

/// Estimate the fixed point at a single `(t, x)` by nested Monte Carlo.
pub fn nested_estimate(
    p: &ProblemSpec,
    t: f64,
    x: &[f64],
    params: &NestedParams,
    drv: &BrownianDriver,
) -> Result<NestedEstimate, SolveError> {
    if x.len() != p.d {
        return Err(SolveError::Invalid("point dimension differs from problem".into()));
    }
    if !(0.0..=p.horizon).contains(&t) {
        return Err(SolveError::Invalid("t outside [0, T]".into()));
    }
    if params.depth == 0 {
        return Ok(NestedEstimate { value: 0.0, work: 0 });
    }
    if params.widths.is_empty() || params.widths.iter().any(|&(g, f)| g == 0 || f == 0) {
        return Err(SolveError::Invalid("widths must be positive".into()));
    }
    if params.steps == 0 {
        return Err(SolveError::Invalid("steps must be at least 1".into()));
    }
    let mut work = 0u64;
    let levels = params.depth + 1;
    let value = estimate_level(p, t, x, levels, levels, params, drv.stream, drv, &mut work)?;
    Ok(NestedEstimate { value, work })
}

#[allow(clippy::too_many_arguments)]
fn estimate_level(
    p: &ProblemSpec,
    t: f64,
    x: &[f64],
    level: usize,
    total_levels: usize,
    params: &NestedParams,
    stream: u64,
    drv: &BrownianDriver,
    work: &mut u64,
) -> Result<f64, SolveError> {
    if level == 0 {
        return Ok(0.0);
    }
    let width_idx = (total_levels - level).min(params.widths.len() - 1);
    let (n_g, n_f) = params.widths[width_idx];
    let horizon = p.horizon - t;

    let env_err = |source| SolveError::NodeEval { node: 0, source };

    // Terminal-value part.
    let g_mean = if horizon == 0.0 {
        p.terminal.eval(&EvalEnv::tx(p.horizon, x)).map_err(env_err)?
    } else {
        let leg = BrownianDriver {
            seed: drv.seed,
            stream: mix_key(&[stream, 1]),
        };
        let dt = horizon / params.steps as f64;
        let mut scratch = WalkScratch::new(p.d, p.m);
        let mut sum = 0.0;
        for path in 0..n_g {
            let mut terminal = 0.0;
            let mut g_err = None;
            let outcome = walk_path(p, t, x, dt, params.steps, &leg, path, &mut scratch, |i, _tt, xs| {
                if i == params.steps && g_err.is_none() {
                    match p.terminal.eval(&EvalEnv::tx(p.horizon, xs)) {
                        Ok(g) => terminal = g,
                        Err(e) => g_err = Some(e),
                    }
                }
            })?;
            if let Some(source) = g_err {
                return Err(env_err(source));
            }
            if outcome.escaped {
                return Err(SolveError::PathExplosion { node: 0, path });
            }
            sum += terminal;
        }
        spend(work, (n_g * params.steps) as u64, params.max_work)?;
        sum / n_g as f64
    };

    // Nonlinearity part: Gauss-Legendre in time, Monte Carlo in space.
    let mut f_part = 0.0;
    if horizon > 0.0 {
        // Enough points to integrate the polynomial iterates of
        // deterministic dynamics exactly: level k produces degree k - 2.
        let q_points = ((level - 1).div_ceil(2)).clamp(1, GAUSS.len());
        for (qi, &(xi, wi)) in GAUSS[q_points - 1].iter().enumerate() {
            let s_q = t + 0.5 * (xi + 1.0) * horizon;
            let w_q = 0.5 * wi;
            let dt = (s_q - t) / params.steps as f64;
            let mut scratch = WalkScratch::new(p.d, p.m);
            let mut sum = 0.0;
            for j in 0..n_f {
                let leg = BrownianDriver {
                    seed: drv.seed,
                    stream: mix_key(&[stream, 2, qi as u64, j as u64]),
                };
                let mut end_state = x.to_vec();
                if s_q > t {
                    let outcome =
                        walk_path(p, t, x, dt, params.steps, &leg, 0, &mut scratch, |i, _tt, xs| {
                            if i == params.steps {
                                end_state.copy_from_slice(xs);
                            }
                        })?;
                    if outcome.escaped {
                        return Err(SolveError::PathExplosion { node: 0, path: j });
                    }
                    spend(work, params.steps as u64, params.max_work)?;
                }
                let child = estimate_level(
                    p,
                    s_q,
                    &end_state,
                    level - 1,
                    total_levels,
                    params,
                    mix_key(&[stream, 3, qi as u64, j as u64]),
                    drv,
                    work,
                )?;
                sum += p
                    .nonlinearity
                    .eval(&EvalEnv::txv(s_q, &end_state, child))
                    .map_err(env_err)?;
            }
            f_part += horizon * w_q * (sum / n_f as f64);
        }
    }

    let value = g_mean + f_part;
    if !value.is_finite() {
        return Err(SolveError::NonFiniteEstimate { node: 0 });
    }
    Ok(value)
}

fn spend(work: &mut u64, amount: u64, cap: u64) -> Result<(), SolveError> {
    *work += amount;
    if *work > cap {
        Err(SolveError::WorkCapExceeded { cap })
    } else {
        Ok(())
    }
}
