//! The Picard fixed-point machinery: the Feynman-Kac map on a grid, the
//! exponentially weighted norm family, the contraction verifier, and the
//! iteration loop.
//!
//! The candidate update is
//!
//! ```text
//! [Phi(v)](t, x) = E[ g(X_T) + integral_t^T f(s, X_s, v(s, X_s)) ds ],
//! ```
//!
//! estimated per grid node by Euler-Maruyama paths with a per-node driver
//! stream derived from `(seed, node)`, so node estimates are independent,
//! reproducible, and scheduling-invariant. In the weighted norm
//! `|v|_lambda = sup_nodes e^(lambda t) |v| / V`, the map contracts with
//! factor `L / lambda`; the default `lambda = 2 L` gives factor 1/2.

mod nested;

pub use nested::{nested_estimate, NestedEstimate, NestedParams};

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::exec::try_map_indexed;
use crate::expr::{EvalEnv, EvalError};
use crate::grid::{GridError, GridFunction, GridSpec};
use crate::lyapunov::{LyapunovError, LyapunovSpec};
use crate::problem::{Domain, ProblemSpec};
use crate::rng::BrownianDriver;
use crate::sde::{SimError, ESCAPE_GUARD};

/// Stream offset separating residual re-estimation from the main node
/// streams, so the residual is free of common-random-number bias.
const RESIDUAL_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrature {
    /// Riemann sum on the left endpoints; aligned with the Euler filtration.
    Left,
    /// Averaged endpoints; useful for bias studies.
    Trapezoid,
}

/// Monte-Carlo budget for one Phi application.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McConfig {
    /// Paths per grid node.
    pub n_paths: usize,
    /// Euler steps per path.
    pub steps: usize,
    /// Driver seed; node streams derive from it.
    pub seed: u64,
    pub quadrature: Quadrature,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("evaluation failed at node {node}: {source}")]
    NodeEval { node: usize, source: Box<EvalError> },
    #[error("path {path} of node {node} hit the escape guard ({ESCAPE_GUARD:e}); the Lyapunov hypothesis should preclude this")]
    PathExplosion { node: usize, path: usize },
    #[error("non-finite estimate at node {node}")]
    NonFiniteEstimate { node: usize },
    #[error("candidates coincide: weighted norm of v - w is zero")]
    ZeroDenominator,
    #[error("Picard iteration diverging: deltas grew for 3 consecutive iterations (last: {last:?})")]
    Diverged { iteration: usize, last: Vec<f64> },
    #[error("nested estimator exceeded the work cap of {cap} simulated steps")]
    WorkCapExceeded { cap: u64 },
    #[error("invalid solver input: {0}")]
    Invalid(String),
}

/// Exponentially weighted sup-norm over grid nodes:
/// `max e^(lambda tau_k) |v(tau_k, x_j)| / V(tau_k, x_j)`.
///
/// Strong tilts switch to a log-domain evaluation to stay overflow-safe.
pub fn weighted_norm(
    v: &GridFunction,
    weight: &LyapunovSpec,
    lambda: f64,
) -> Result<f64, SolveError> {
    let log_route = (lambda.abs() + weight.rho.abs()) * v.t_end > 30.0;
    let s = v.spec.spatial_nodes();
    let mut x = vec![0.0; v.dim()];
    let mut best = 0.0f64;
    for k in 0..=v.spec.time_steps {
        let t = v.time_knot(k);
        for j in 0..s {
            v.node_point(j, &mut x);
            let u = v.values[k * s + j];
            let term = if log_route {
                if u == 0.0 {
                    0.0
                } else {
                    (lambda * t + u.abs().ln() - weight.log_value(t, &x)?).exp()
                }
            } else {
                (lambda * t).exp() * u.abs() / weight.value(t, &x)?
            };
            if !term.is_finite() {
                return Err(SolveError::NonFiniteEstimate { node: k * s + j });
            }
            best = best.max(term);
        }
    }
    Ok(best)
}

/// Quadrature weight for step `i` of `m` on a grid of spacing `dt`.
#[inline]
fn quad_weight(rule: Quadrature, i: usize, m: usize, dt: f64) -> f64 {
    match rule {
        Quadrature::Left => {
            if i < m {
                dt
            } else {
                0.0
            }
        }
        Quadrature::Trapezoid => {
            if i == 0 || i == m {
                0.5 * dt
            } else {
                dt
            }
        }
    }
}

struct NodeTask {
    node: usize,
    t: f64,
    x: Vec<f64>,
}

fn node_tasks(grid: &GridFunction) -> Vec<NodeTask> {
    let s = grid.spec.spatial_nodes();
    let mut tasks = Vec::with_capacity((grid.spec.time_steps + 1) * s);
    let mut x = vec![0.0; grid.dim()];
    for k in 0..=grid.spec.time_steps {
        let t = grid.time_knot(k);
        for j in 0..s {
            grid.node_point(j, &mut x);
            tasks.push(NodeTask {
                node: k * s + j,
                t,
                x: x.clone(),
            });
        }
    }
    tasks
}

/// One Monte-Carlo application of the Picard map to `v` on `v`'s own grid.
///
/// Node `(k, j)` uses driver stream `k * S + j + stream_base`; identical
/// configurations reproduce bitwise on any worker count.
pub fn apply_phi(p: &ProblemSpec, v: &GridFunction, mc: &McConfig) -> Result<GridFunction, SolveError> {
    apply_phi_streams(p, v, mc, 0)
}

fn apply_phi_streams(
    p: &ProblemSpec,
    v: &GridFunction,
    mc: &McConfig,
    stream_base: u64,
) -> Result<GridFunction, SolveError> {
    if v.dim() != p.d {
        return Err(SolveError::Invalid("grid dimension differs from problem".into()));
    }
    if mc.n_paths == 0 || mc.steps == 0 {
        return Err(SolveError::Invalid("need n_paths >= 1 and steps >= 1".into()));
    }
    if (v.t_end - p.horizon).abs() > 1e-12 {
        return Err(SolveError::Invalid("grid horizon differs from problem horizon".into()));
    }
    let tasks = node_tasks(v);
    let f_reads_v = p.f_references_v();
    let f_zero = p.f_is_zero();
    let values: Vec<f64> = try_map_indexed(tasks.len(), |idx| {
        let task = &tasks[idx];
        let drv = BrownianDriver {
            seed: mc.seed,
            stream: stream_base + task.node as u64,
        };
        phi_node(p, v, mc, task, &drv, f_reads_v, f_zero)
    })?;
    let mut out = GridFunction::zeros(v.spec.clone(), v.t_end);
    out.values = values;
    Ok(out)
}

/// Estimate `[Phi(v)](t, x)` at one node.
fn phi_node(
    p: &ProblemSpec,
    v: &GridFunction,
    mc: &McConfig,
    task: &NodeTask,
    drv: &BrownianDriver,
    f_reads_v: bool,
    f_zero: bool,
) -> Result<f64, SolveError> {
    let node = task.node;
    let horizon = p.horizon - task.t;
    let eval_err = |source| SolveError::NodeEval { node, source };

    // Terminal knot: Phi(v)(T, x) = g(x) exactly.
    if horizon == 0.0 {
        return p
            .terminal
            .eval(&EvalEnv::tx(p.horizon, &task.x))
            .map_err(eval_err);
    }

    // Constant coefficients on full space with f == 0: the Euler endpoint is
    // x + mu h + sigma W_h with W_h ~ N(0, h I), so one Gaussian per lane
    // replaces the M-step loop. Statistically identical, much cheaper.
    if let (true, Some(cc), Domain::FullSpace) = (f_zero, &p.const_coeffs, &p.domain) {
        let scale = horizon.sqrt();
        let d = p.d;
        let m = p.m;
        let mut g_sum = 0.0;
        let mut w = vec![0.0; m];
        let mut x_t = vec![0.0; d];
        for path in 0..mc.n_paths {
            let mut cell = drv.cell(path as u64, 0);
            cell.fill_normals(&mut w, scale);
            for (i, slot) in x_t.iter_mut().enumerate() {
                let mut acc = task.x[i] + cc.mu[i] * horizon;
                for (s, wj) in cc.sigma[i * m..(i + 1) * m].iter().zip(w.iter()) {
                    acc += s * wj;
                }
                if !(acc.abs() <= ESCAPE_GUARD) {
                    return Err(SolveError::PathExplosion { node, path });
                }
                *slot = acc;
            }
            g_sum += p
                .terminal
                .eval(&EvalEnv::tx(p.horizon, &x_t))
                .map_err(eval_err)?;
        }
        let est = g_sum / mc.n_paths as f64;
        if !est.is_finite() {
            return Err(SolveError::NonFiniteEstimate { node });
        }
        return Ok(est);
    }

    let dt = horizon / mc.steps as f64;
    let mut scratch = crate::sde::WalkScratch::new(p.d, p.m);
    let mut sum = 0.0;
    for path in 0..mc.n_paths {
        let mut qsum = 0.0;
        let mut terminal = 0.0;
        let mut inner_err: Option<Box<EvalError>> = None;
        let outcome = crate::sde::walk_path(
            p,
            task.t,
            &task.x,
            dt,
            mc.steps,
            drv,
            path,
            &mut scratch,
            |i, t, x| {
                if inner_err.is_some() {
                    return;
                }
                if !f_zero {
                    let w = quad_weight(mc.quadrature, i, mc.steps, dt);
                    if w != 0.0 {
                        let vv = if f_reads_v { v.eval(t, x) } else { 0.0 };
                        match p.nonlinearity.eval(&EvalEnv::txv(t, x, vv)) {
                            Ok(fv) => qsum += w * fv,
                            Err(e) => inner_err = Some(e),
                        }
                    }
                }
                if i == mc.steps {
                    match p.terminal.eval(&EvalEnv::tx(p.horizon, x)) {
                        Ok(g) => terminal = g,
                        Err(e) => inner_err = Some(e),
                    }
                }
            },
        )?;
        if let Some(source) = inner_err {
            return Err(eval_err(source));
        }
        if outcome.escaped {
            return Err(SolveError::PathExplosion { node, path });
        }
        sum += terminal + qsum;
    }
    let est = sum / mc.n_paths as f64;
    if !est.is_finite() {
        return Err(SolveError::NonFiniteEstimate { node });
    }
    Ok(est)
}

/// Measured contraction of the Picard map between two candidates.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    /// `|Phi(v) - Phi(w)|_lambda / |v - w|_lambda`.
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Monte-Carlo standard error of the numerator, measured at the node
    /// attaining the sup and scaled like the norm.
    pub numerator_se: f64,
    pub lambda: f64,
}

/// Measure `|Phi(v) - Phi(w)|_lambda / |v - w|_lambda` with common random
/// numbers: both applications walk identical trajectories, so the terminal
/// part cancels exactly and only the f-difference integral remains.
pub fn contraction_ratio(
    p: &ProblemSpec,
    v: &GridFunction,
    w: &GridFunction,
    weight: &LyapunovSpec,
    lambda: f64,
    mc: &McConfig,
) -> Result<ContractionReport, SolveError> {
    if v.spec != w.spec {
        return Err(SolveError::Invalid("candidates live on different grids".into()));
    }
    let denominator = weighted_norm(&v.sub(w), weight, lambda)?;
    if denominator == 0.0 {
        return Err(SolveError::ZeroDenominator);
    }
    let tasks = node_tasks(v);
    let f_reads_v = p.f_references_v();

    struct NodeDiff {
        scaled_mean: f64,
        scaled_se: f64,
    }
    let diffs: Vec<NodeDiff> = try_map_indexed(tasks.len(), |idx| -> Result<NodeDiff, SolveError> {
            let task = &tasks[idx];
            let node = task.node;
            let drv = BrownianDriver {
                seed: mc.seed,
                stream: node as u64,
            };
            let horizon = p.horizon - task.t;
            let node_weight =
                (lambda * task.t).exp() / weight.value(task.t, &task.x)?;
            if horizon == 0.0 || !f_reads_v {
                // Phi(v) = Phi(w) identically.
                return Ok(NodeDiff {
                    scaled_mean: 0.0,
                    scaled_se: 0.0,
                });
            }
            let dt = horizon / mc.steps as f64;
            let mut scratch = crate::sde::WalkScratch::new(p.d, p.m);
            // Welford accumulation of the per-path f-difference integral.
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for path in 0..mc.n_paths {
                let mut delta = 0.0;
                let mut inner_err: Option<Box<EvalError>> = None;
                let outcome = crate::sde::walk_path(
                    p,
                    task.t,
                    &task.x,
                    dt,
                    mc.steps,
                    &drv,
                    path,
                    &mut scratch,
                    |i, t, x| {
                        if inner_err.is_some() {
                            return;
                        }
                        let qw = quad_weight(mc.quadrature, i, mc.steps, dt);
                        if qw == 0.0 {
                            return;
                        }
                        let fv = p.nonlinearity.eval(&EvalEnv::txv(t, x, v.eval(t, x)));
                        let fw = p.nonlinearity.eval(&EvalEnv::txv(t, x, w.eval(t, x)));
                        match (fv, fw) {
                            (Ok(a), Ok(b)) => delta += qw * (a - b),
                            (Err(e), _) | (_, Err(e)) => inner_err = Some(e),
                        }
                    },
                )?;
                if let Some(source) = inner_err {
                    return Err(SolveError::NodeEval { node, source });
                }
                if outcome.escaped {
                    return Err(SolveError::PathExplosion { node, path });
                }
                let n = (path + 1) as f64;
                let d1 = delta - mean;
                mean += d1 / n;
                m2 += d1 * (delta - mean);
            }
            let n = mc.n_paths as f64;
            let se = if mc.n_paths > 1 {
                (m2 / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            Ok(NodeDiff {
                scaled_mean: node_weight * mean.abs(),
                scaled_se: node_weight * se,
            })
        })?;

    let mut numerator = 0.0;
    let mut numerator_se = 0.0;
    for d in &diffs {
        if d.scaled_mean > numerator {
            numerator = d.scaled_mean;
            numerator_se = d.scaled_se;
        }
    }
    Ok(ContractionReport {
        ratio: numerator / denominator,
        numerator,
        denominator,
        numerator_se,
        lambda,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationStat {
    /// `|u_(k+1) - u_k|_lambda`.
    pub delta: f64,
    /// `delta_k / delta_(k-1)`, recorded from the second iteration on.
    pub ratio: Option<f64>,
    /// Not serialized: persisted reports must be reproducible byte-for-byte
    /// apart from the single timestamp line.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Outcome of the Picard iteration.
#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub lambda: f64,
    pub tolerance: f64,
    pub converged: bool,
    pub iterations: Vec<IterationStat>,
    /// `|u - Phi(u)|_lambda`, re-estimated with fresh driver streams.
    pub residual: f64,
    #[serde(skip)]
    pub final_u: GridFunction,
}

/// Iterate `u_0 = 0`, `u_(k+1) = Phi(u_k)` until the weighted delta falls
/// below `tol` or `max_iter` is hit. Successive iterates share driver
/// streams (common random numbers), which makes the geometric contraction
/// observable at desk budgets; the final residual uses fresh streams to
/// avoid the induced bias.
///
/// When `f` does not reference `v` the map is constant, so the loop stops
/// after one application with `converged = true`.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    p: &ProblemSpec,
    weight: &LyapunovSpec,
    grid: &GridSpec,
    mc: &McConfig,
    lambda: Option<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    if !(tol > 0.0) {
        return Err(SolveError::Invalid("tol must be positive".into()));
    }
    if max_iter == 0 {
        return Err(SolveError::Invalid("max_iter must be at least 1".into()));
    }
    let lambda = lambda.unwrap_or(2.0 * p.lipschitz);

    let mut u = GridFunction::zeros(grid.clone(), p.horizon);
    preflight(p, weight, &u)?;

    let mut iterations: Vec<IterationStat> = Vec::new();
    let mut converged = false;
    let mut growth_streak = 0usize;
    for _ in 0..max_iter {
        let start = Instant::now();
        let next = apply_phi_streams(p, &u, mc, 0)?;
        let delta = weighted_norm(&next.sub(&u), weight, lambda)?;
        let ratio = iterations.last().map(|prev| delta / prev.delta);
        if let Some(prev) = iterations.last() {
            if delta > prev.delta {
                growth_streak += 1;
            } else {
                growth_streak = 0;
            }
        }
        iterations.push(IterationStat {
            delta,
            ratio,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        u = next;
        if delta <= tol || !p.f_references_v() {
            converged = true;
            break;
        }
        if growth_streak >= 3 {
            let last = iterations.iter().rev().take(4).map(|i| i.delta).collect();
            return Err(SolveError::Diverged {
                iteration: iterations.len(),
                last,
            });
        }
    }

    let fresh = apply_phi_streams(p, &u, mc, RESIDUAL_STREAM_OFFSET)?;
    let residual = weighted_norm(&u.sub(&fresh), weight, lambda)?;
    Ok(SolveReport {
        lambda,
        tolerance: tol,
        converged,
        iterations,
        residual,
        final_u: u,
    })
}

/// Integrability preflight: the weight must be positive and the data
/// `g / V(T, .)` and `f(., ., 0) / V` must be finite across the grid, which
/// is what makes the Monte-Carlo estimates of the fixed-point map finite.
fn preflight(
    p: &ProblemSpec,
    weight: &LyapunovSpec,
    grid: &GridFunction,
) -> Result<(), SolveError> {
    let s = grid.spec.spatial_nodes();
    let mut x = vec![0.0; grid.dim()];
    for k in 0..=grid.spec.time_steps {
        let t = grid.time_knot(k);
        for j in 0..s {
            grid.node_point(j, &mut x);
            let node = k * s + j;
            let w = weight.value(t, &x)?;
            let g = p
                .terminal
                .eval(&EvalEnv::tx(p.horizon, &x))
                .map_err(|source| SolveError::NodeEval { node, source })?;
            let f0 = p
                .nonlinearity
                .eval(&EvalEnv::txv(t, &x, 0.0))
                .map_err(|source| SolveError::NodeEval { node, source })?;
            if !(g / w).is_finite() || !(f0 / w).is_finite() {
                return Err(SolveError::NonFiniteEstimate { node });
            }
        }
    }
    Ok(())
}

/// Shell-wise decay table for the ratio `|u| / V`: per shell, the sup of the
/// ratio over grid nodes whose spatial norm falls in `(r_prev, r]`, across
/// all time knots. When `V` dominates `u`'s growth the outer shells trend
/// small.
pub fn decay_diagnostic(
    u: &GridFunction,
    weight: &LyapunovSpec,
    shells: &[f64],
) -> Result<Vec<ShellStat>, SolveError> {
    let s = u.spec.spatial_nodes();
    let mut x = vec![0.0; u.dim()];
    let mut stats: Vec<ShellStat> = shells
        .iter()
        .enumerate()
        .map(|(i, &r)| ShellStat {
            r_inner: if i == 0 { 0.0 } else { shells[i - 1] },
            r_outer: r,
            sup_ratio: None,
        })
        .collect();
    for k in 0..=u.spec.time_steps {
        let t = u.time_knot(k);
        for j in 0..s {
            u.node_point(j, &mut x);
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let shell = stats.iter_mut().find(|sh| {
                (norm > sh.r_inner || (sh.r_inner == 0.0 && norm == 0.0)) && norm <= sh.r_outer
            });
            if let Some(sh) = shell {
                let ratio = u.node_value(k, j).abs() / weight.value(t, &x)?;
                sh.sup_ratio = Some(sh.sup_ratio.map_or(ratio, |r: f64| r.max(ratio)));
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShellStat {
    pub r_inner: f64,
    pub r_outer: f64,
    /// None when the shell contains no grid node.
    pub sup_ratio: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Role};
    use crate::problem::{build, ProblemInput};

    fn frozen_linear_f() -> ProblemSpec {
        build(&ProblemInput {
            d: 1,
            m: 1,
            horizon: 1.0,
            drift: vec!["0".into()],
            diffusion: vec!["0".into()],
            nonlinearity: Some("v".into()),
            terminal: Some("1".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap()
    }

    fn unit_weight(d: usize) -> LyapunovSpec {
        LyapunovSpec::elliptic(parse("1", Role::Lyapunov, d).unwrap(), 0.0)
    }

    fn small_grid() -> GridSpec {
        GridSpec::new(10, vec![-1.0], vec![1.0], vec![5]).unwrap()
    }

    fn mc(n: usize, steps: usize) -> McConfig {
        McConfig {
            n_paths: n,
            steps,
            seed: 99,
            quadrature: Quadrature::Left,
        }
    }

    #[test]
    fn weighted_norm_basics() {
        let spec = small_grid();
        let zero = GridFunction::zeros(spec.clone(), 1.0);
        let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
        assert_eq!(weighted_norm(&zero, &weight, 2.0).unwrap(), 0.0);

        // v set to the weight itself at nodes, lambda = 0: norm is 1.
        let v = GridFunction::from_fn(spec.clone(), 1.0, |t, x| weight.value(t, x).unwrap());
        let n = weighted_norm(&v, &weight, 0.0).unwrap();
        assert!((n - 1.0).abs() < 1e-12);

        // v = e^(-lambda t) V: the lambda-norm cancels to 1.
        let lambda = 1.7;
        let v = GridFunction::from_fn(spec, 1.0, |t, x| {
            (-lambda * t).exp() * weight.value(t, x).unwrap()
        });
        let n = weighted_norm(&v, &weight, lambda).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_norm_log_route_matches_plain() {
        let spec = small_grid();
        let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
        let v = GridFunction::from_fn(spec, 1.0, |t, x| (1.0 + t) * (1.0 + x[0] * x[0]).sqrt());
        // lambda * T = 40 forces the log route; compare against direct
        // computation with moderate magnitudes.
        let lambda = 40.0;
        let log_norm = weighted_norm(&v, &weight, lambda).unwrap();
        let mut expected = 0.0f64;
        let s = v.spec.spatial_nodes();
        let mut x = vec![0.0];
        for k in 0..=v.spec.time_steps {
            let t = v.time_knot(k);
            for j in 0..s {
                v.node_point(j, &mut x);
                expected = expected
                    .max((lambda * t).exp() * v.node_value(k, j).abs() / weight.value(t, &x).unwrap());
            }
        }
        assert!(
            (log_norm - expected).abs() <= 1e-9 * expected,
            "{log_norm} vs {expected}"
        );
    }

    #[test]
    fn phi_of_constant_terminal_is_exact() {
        // f = 0, g = 1: Phi(v) = 1 for any v, exactly.
        let p = build(&ProblemInput {
            family: Some("brownian".into()),
            d: 1,
            m: 1,
            horizon: 1.0,
            nonlinearity: Some("0".into()),
            terminal: Some("1".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let v = GridFunction::from_fn(small_grid(), 1.0, |t, x| t * x[0]);
        let phi = apply_phi(&p, &v, &mc(64, 4)).unwrap();
        for val in &phi.values {
            assert_eq!(*val, 1.0);
        }
    }

    #[test]
    fn phi_integrates_constant_nonlinearity() {
        // mu = sigma = 0, f = v, g = 0, v = 1: Phi(v)(t,x) = T - t exactly
        // under the left rule.
        let mut p = frozen_linear_f();
        p.terminal = parse("0", Role::Terminal, 1).unwrap();
        let v = GridFunction::from_fn(small_grid(), 1.0, |_, _| 1.0);
        let phi = apply_phi(&p, &v, &mc(8, 50)).unwrap();
        let s = phi.spec.spatial_nodes();
        for k in 0..=phi.spec.time_steps {
            let expect = 1.0 - phi.time_knot(k);
            for j in 0..s {
                let got = phi.node_value(k, j);
                assert!(
                    (got - expect).abs() <= 1e-12,
                    "node ({k},{j}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn phi_brownian_quadratic_terminal() {
        // Brownian d=1, f=0, g=x^2: Phi(v)(t,x) = x^2 + (T-t) within 3 SE.
        let p = build(&ProblemInput {
            family: Some("brownian".into()),
            d: 1,
            m: 1,
            horizon: 1.0,
            nonlinearity: Some("0".into()),
            terminal: Some("norm2".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let spec = GridSpec::new(2, vec![-2.0], vec![2.0], vec![5]).unwrap();
        let v = GridFunction::zeros(spec, 1.0);
        let n = 40_000;
        let phi = apply_phi(&p, &v, &mc(n, 1)).unwrap();
        let s = phi.spec.spatial_nodes();
        let mut x = vec![0.0];
        for k in 0..=phi.spec.time_steps {
            let t = phi.time_knot(k);
            for j in 0..s {
                phi.node_point(j, &mut x);
                let h: f64 = 1.0 - t;
                let expect = x[0] * x[0] + h;
                // Var(g) = 4 x^2 h + 2 h^2.
                let se = ((4.0 * x[0] * x[0] * h + 2.0 * h * h) / n as f64).sqrt();
                let got = phi.node_value(k, j);
                assert!(
                    (got - expect).abs() <= 3.5 * se + 1e-12,
                    "node ({k},{j}): {got} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn contraction_zero_for_v_independent_f() {
        let p = build(&ProblemInput {
            family: Some("brownian".into()),
            d: 1,
            m: 1,
            horizon: 1.0,
            nonlinearity: Some("x1".into()),
            terminal: Some("norm2".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let spec = small_grid();
        let v = GridFunction::from_fn(spec.clone(), 1.0, |_, _| 1.0);
        let w = GridFunction::zeros(spec, 1.0);
        let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
        let rep = contraction_ratio(&p, &v, &w, &weight, 2.0, &mc(32, 8)).unwrap();
        assert_eq!(rep.ratio, 0.0);
    }

    #[test]
    fn contraction_deterministic_case_below_half() {
        // mu = sigma = 0, f = v, lambda = 2L = 2, v = 1, w = 0, V = 1:
        // measured ratio must sit below 1/2 with zero Monte-Carlo slack.
        let p = frozen_linear_f();
        let spec = small_grid();
        let v = GridFunction::from_fn(spec.clone(), 1.0, |_, _| 1.0);
        let w = GridFunction::zeros(spec, 1.0);
        let weight = unit_weight(1);
        let rep = contraction_ratio(&p, &v, &w, &weight, 2.0, &mc(4, 100)).unwrap();
        assert!(rep.ratio <= 0.5, "ratio {}", rep.ratio);
        assert_eq!(rep.numerator_se, 0.0);
        // Exact value: sup_t e^(2t)(T-t) / e^(2T) = 0.5 e / e^2.
        let exact = 0.5 * 1.0f64.exp() / 2.0f64.exp();
        assert!((rep.ratio - exact).abs() < 2e-3, "ratio {}", rep.ratio);
    }

    #[test]
    fn contraction_rejects_equal_candidates() {
        let p = frozen_linear_f();
        let spec = small_grid();
        let v = GridFunction::zeros(spec.clone(), 1.0);
        let w = GridFunction::zeros(spec, 1.0);
        let weight = unit_weight(1);
        assert!(matches!(
            contraction_ratio(&p, &v, &w, &weight, 2.0, &mc(4, 8)),
            Err(SolveError::ZeroDenominator)
        ));
    }

    #[test]
    fn picard_deterministic_exponential() {
        // mu = sigma = 0, f = v, g = 1, T = 1: u(t, x) = e^(1-t).
        let p = frozen_linear_f();
        let weight = unit_weight(1);
        let report = picard_solve(
            &p,
            &weight,
            &small_grid(),
            &mc(4, 2000),
            None,
            1e-6,
            60,
        )
        .unwrap();
        assert!(report.converged);
        let u00 = report.final_u.eval(0.0, &[0.0]);
        let e = 1.0f64.exp();
        // Bias stacks the O(dt) left rule with the piecewise-linear time
        // interpolation of the K=10 grid (convex in t, so both overshoot).
        assert!((u00 - e).abs() < 5e-3, "u(0,0) = {u00}, e = {e}");
        assert!(report.residual <= 2.0 * 1e-6 + 1e-9, "residual {}", report.residual);
    }

    #[test]
    fn picard_f_independent_stops_after_one_iteration() {
        let p = build(&ProblemInput {
            family: Some("brownian".into()),
            d: 1,
            m: 1,
            horizon: 1.0,
            nonlinearity: Some("0".into()),
            terminal: Some("norm2".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
        let report = picard_solve(
            &p,
            &weight,
            &GridSpec::new(4, vec![-2.0], vec![2.0], vec![9]).unwrap(),
            &mc(2000, 1),
            None,
            1e-3,
            10,
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations.len(), 1);
    }

    #[test]
    fn picard_diverges_with_violated_lipschitz() {
        // Declared L = 0.05 gives lambda = 0.1, but the true slope is 4:
        // the iteration inflates and must abort with a diagnostic.
        let mut p = frozen_linear_f();
        p.nonlinearity = parse("4*v", Role::Nonlinearity, 1).unwrap();
        p.lipschitz = 0.05;
        let weight = unit_weight(1);
        let err = picard_solve(&p, &weight, &small_grid(), &mc(2, 64), None, 1e-9, 50);
        assert!(matches!(err, Err(SolveError::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn decay_diagnostic_shapes() {
        let spec = GridSpec::new(2, vec![-4.0], vec![4.0], vec![17]).unwrap();
        let weight = LyapunovSpec::polynomial(4.0, 1.0, 1);
        let zero = GridFunction::zeros(spec.clone(), 1.0);
        let stats = decay_diagnostic(&zero, &weight, &[1.0, 2.0, 4.0]).unwrap();
        assert!(stats.iter().all(|s| s.sup_ratio.unwrap_or(0.0) == 0.0));

        // u = V at nodes: every shell ratio is exactly 1.
        let v = GridFunction::from_fn(spec.clone(), 1.0, |t, x| weight.value(t, x).unwrap());
        let stats = decay_diagnostic(&v, &weight, &[1.0, 2.0, 4.0]).unwrap();
        for s in &stats {
            assert!((s.sup_ratio.unwrap() - 1.0).abs() < 1e-12);
        }

        // u ~ x^2 against V ~ (1+x^2)^2: outer shells decay.
        let u = GridFunction::from_fn(spec, 1.0, |_, x| x[0] * x[0]);
        let stats = decay_diagnostic(&u, &weight, &[1.0, 2.0, 4.0]).unwrap();
        let r: Vec<f64> = stats.iter().map(|s| s.sup_ratio.unwrap()).collect();
        assert!(r[1] < r[0] && r[2] < r[1], "ratios {r:?}");
    }
}
