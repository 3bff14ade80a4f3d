//! Euler-Maruyama simulation with deterministic seeding, freeze-on-exit
//! handling, shared-increment coupling, and mean-square stability estimates.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::exec::try_map_indexed;
use crate::expr::{EvalEnv, EvalError};
use crate::problem::ProblemSpec;
use crate::rng::BrownianDriver;

/// Paths whose coordinates pass this magnitude are flagged as numerically
/// exploding; the Lyapunov hypothesis should preclude them, so solvers treat
/// the flag as an error rather than propagating junk.
pub const ESCAPE_GUARD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("evaluation failed on path {path} at step {step}: {source}")]
    Eval {
        path: usize,
        step: usize,
        source: Box<EvalError>,
    },
    #[error("start point lies outside the problem domain")]
    StartOutsideDomain,
    #[error("invalid simulation parameters: {0}")]
    Invalid(String),
}

/// A batch of simulated trajectories on one uniform grid.
///
/// States are stored path-major: `states[(path * (steps+1) + k) * d ..][..d]`.
/// A frozen path holds its last in-domain state from `frozen_from` onward.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
    pub d: usize,
    pub n_paths: usize,
    pub states: Vec<f64>,
    /// First grid index at which the path was frozen, if any.
    pub frozen_from: Vec<Option<u32>>,
    /// Path left the domain or hit the escape guard.
    pub exited: Vec<bool>,
    /// Path hit the escape guard specifically.
    pub escaped: Vec<bool>,
}

impl PathBatch {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * (self.steps + 1) + step) * self.d;
        &self.states[base..base + self.d]
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + self.dt * step as f64
    }

    pub fn any_escaped(&self) -> bool {
        self.escaped.iter().any(|&e| e)
    }
}

/// What happened to one path during a walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOutcome {
    pub frozen_from: Option<u32>,
    pub escaped: bool,
}

/// Core Euler-Maruyama walker for a single path. Invokes `observe` at every
/// grid index including the start; the observed state is the frozen value
/// once the path has been absorbed.
///
/// Freeze semantics: if the update leaving grid index `k` lands outside the
/// domain or beyond the escape guard, the path keeps its index-`k` state from
/// index `k+1` onward. The held state therefore always lies in the domain.
pub(crate) fn walk_path<F: FnMut(usize, f64, &[f64])>(
    p: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    dt: f64,
    steps: usize,
    drv: &BrownianDriver,
    path: usize,
    scratch: &mut WalkScratch,
    mut observe: F,
) -> Result<PathOutcome, SimError> {
    let d = p.d;
    let m = p.m;
    scratch.x.clear();
    scratch.x.extend_from_slice(x0);
    let mut outcome = PathOutcome {
        frozen_from: None,
        escaped: false,
    };
    observe(0, t0, &scratch.x);
    for k in 0..steps {
        let t = t0 + dt * k as f64;
        if outcome.frozen_from.is_none() {
            if let Some(cc) = &p.const_coeffs {
                scratch.mu.copy_from_slice(&cc.mu);
                scratch.sigma.copy_from_slice(&cc.sigma);
            } else {
                p.eval_drift(t, &scratch.x, &mut scratch.mu)
                    .map_err(|source| SimError::Eval { path, step: k, source })?;
                p.eval_diffusion(t, &scratch.x, &mut scratch.sigma)
                    .map_err(|source| SimError::Eval { path, step: k, source })?;
            }
            drv.increment(path as u64, k as u64, dt, &mut scratch.dw);
            for i in 0..d {
                let mut acc = scratch.x[i] + scratch.mu[i] * dt;
                let row = &scratch.sigma[i * m..(i + 1) * m];
                for (s, w) in row.iter().zip(scratch.dw.iter()) {
                    acc += s * w;
                }
                scratch.next[i] = acc;
            }
            let guard_hit = scratch.next.iter().any(|v| !(v.abs() <= ESCAPE_GUARD));
            if guard_hit || !p.domain.contains(&scratch.next) {
                outcome.frozen_from = Some((k + 1) as u32);
                outcome.escaped = guard_hit;
            } else {
                scratch.x.copy_from_slice(&scratch.next);
            }
        }
        observe(k + 1, t0 + dt * (k + 1) as f64, &scratch.x);
    }
    Ok(outcome)
}

pub(crate) struct WalkScratch {
    x: Vec<f64>,
    next: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

impl WalkScratch {
    pub(crate) fn new(d: usize, m: usize) -> Self {
        WalkScratch {
            x: Vec::with_capacity(d),
            next: vec![0.0; d],
            mu: vec![0.0; d],
            sigma: vec![0.0; d * m],
            dw: vec![0.0; m],
        }
    }
}

fn check_args(p: &ProblemSpec, t0: f64, x0: &[f64], steps: usize, n: usize) -> Result<(), SimError> {
    if x0.len() != p.d {
        return Err(SimError::Invalid(format!(
            "start point has dimension {}, problem has d={}",
            x0.len(),
            p.d
        )));
    }
    if !(0.0..=p.horizon).contains(&t0) {
        return Err(SimError::Invalid(format!(
            "start time {t0} outside [0, {}]",
            p.horizon
        )));
    }
    if steps == 0 || n == 0 {
        return Err(SimError::Invalid("need steps >= 1 and paths >= 1".into()));
    }
    if !p.domain.contains(x0) {
        return Err(SimError::StartOutsideDomain);
    }
    Ok(())
}

/// Simulate `n` Euler-Maruyama paths of `X^{t0,x0}` to the horizon on a
/// uniform `steps`-step grid. Bitwise deterministic in
/// `(seed, stream, steps, n)` regardless of worker count.
pub fn simulate(
    p: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    steps: usize,
    n: usize,
    drv: &BrownianDriver,
) -> Result<PathBatch, SimError> {
    check_args(p, t0, x0, steps, n)?;
    let dt = (p.horizon - t0) / steps as f64;
    let d = p.d;
    let row = (steps + 1) * d;
    let mut states = vec![0.0; n * row];
    let run = |(path, chunk): (usize, &mut [f64])| -> Result<PathOutcome, SimError> {
        let mut scratch = WalkScratch::new(d, p.m);
        walk_path(p, t0, x0, dt, steps, drv, path, &mut scratch, |k, _t, x| {
            chunk[k * d..(k + 1) * d].copy_from_slice(x);
        })
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<PathOutcome> = states
        .par_chunks_mut(row)
        .enumerate()
        .map(run)
        .collect::<Result<_, _>>()?;
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<PathOutcome> = states
        .chunks_mut(row)
        .enumerate()
        .map(run)
        .collect::<Result<_, _>>()?;
    Ok(PathBatch {
        t0,
        dt,
        steps,
        d,
        n_paths: n,
        states,
        frozen_from: outcomes.iter().map(|o| o.frozen_from).collect(),
        exited: outcomes.iter().map(|o| o.frozen_from.is_some()).collect(),
        escaped: outcomes.iter().map(|o| o.escaped).collect(),
    })
}

/// Simulate two problems against the *same* Brownian increments. The batches
/// consume identical `(path, step)` cells, so trajectories agree bitwise
/// wherever the coefficients agree along the visited states.
pub fn simulate_coupled(
    p1: &ProblemSpec,
    p2: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    steps: usize,
    n: usize,
    drv: &BrownianDriver,
) -> Result<(PathBatch, PathBatch), SimError> {
    if p1.d != p2.d || p1.m != p2.m || p1.horizon != p2.horizon || p1.domain != p2.domain {
        return Err(SimError::Invalid(
            "coupled problems must share d, m, T and domain".into(),
        ));
    }
    let a = simulate(p1, t0, x0, steps, n, drv)?;
    let b = simulate(p2, t0, x0, steps, n, drv)?;
    Ok((a, b))
}

/// Streaming estimator: mean and standard error of `value(path)` over `n`
/// simulated paths, without materializing the batch. `value` folds over
/// grid points via the observe callback.
pub(crate) fn fold_paths<A, FInit, FStep, FFinish>(
    p: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    steps: usize,
    n: usize,
    drv: &BrownianDriver,
    init: FInit,
    step_fn: FStep,
    finish: FFinish,
) -> Result<MeanSe, SimError>
where
    A: Send,
    FInit: Fn() -> A + Sync,
    FStep: Fn(&mut A, usize, f64, &[f64]) + Sync,
    FFinish: Fn(A, PathOutcome) -> Result<f64, SimError> + Sync,
{
    check_args(p, t0, x0, steps, n)?;
    let dt = (p.horizon - t0) / steps as f64;
    let values: Vec<f64> = try_map_indexed(n, |path| {
        let mut scratch = WalkScratch::new(p.d, p.m);
        let mut acc = init();
        let outcome = walk_path(p, t0, x0, dt, steps, drv, path, &mut scratch, |k, t, x| {
            step_fn(&mut acc, k, t, x)
        })?;
        finish(acc, outcome)
    })?;
    Ok(MeanSe::from_values(&values))
}

/// Sample mean with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_values(values: &[f64]) -> MeanSe {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            0.0
        };
        MeanSe {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Mean-square gap between two solutions of the same SDE started at
/// `(t, x)` and `(t2, x2)`, estimated with shared increments, next to the
/// closed-form stability bound it must stay below.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// Per requested evaluation time: (s, estimate, bound).
    pub gaps: Vec<(f64, MeanSe, f64)>,
    pub lipschitz_used: f64,
}

/// Estimate `E |X^{t,x}_s - X^{t2,x2}_s|^2` for each `s` in `s_values`,
/// with both processes driven by identical increments on the overlap.
///
/// The companion bound is
/// `9 (|x-x2| + |t-t2|^(1/2))^2 (1 + sqrt(T) sup_r |mu(r,x2)| +
/// sup_r |sigma(r,x2)|_F)^2 exp(6 L^2 T (T+1))`, valid for compactly
/// supported coefficients with global Lipschitz constant `L = l_coef`.
/// Requested times snap to the simulation grid.
#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    p: &ProblemSpec,
    t: f64,
    x: &[f64],
    t2: f64,
    x2: &[f64],
    s_values: &[f64],
    steps: usize,
    n: usize,
    drv: &BrownianDriver,
    l_coef: f64,
) -> Result<StabilityReport, SimError> {
    if !(t <= t2) {
        return Err(SimError::Invalid("need t <= t2".into()));
    }
    check_args(p, t, x, steps, n)?;
    if x2.len() != p.d {
        return Err(SimError::Invalid("x2 dimension mismatch".into()));
    }
    let t_end = s_values.iter().cloned().fold(t2, f64::max);
    if t_end > p.horizon {
        return Err(SimError::Invalid("evaluation time beyond horizon".into()));
    }
    let dt = (t_end - t) / steps as f64;
    let start2 = ((t2 - t) / dt).round() as usize;
    let eval_steps: Vec<usize> = s_values
        .iter()
        .map(|s| (((s - t) / dt).round() as usize).min(steps))
        .collect();

    let d = p.d;
    let m = p.m;
    let per_path: Vec<Vec<f64>> = try_map_indexed(n, |path| {
            let mut a = x.to_vec();
            let mut b = x2.to_vec();
            let mut mu = vec![0.0; d];
            let mut sigma = vec![0.0; d * m];
            let mut dw = vec![0.0; m];
            let mut next = vec![0.0; d];
            let mut gaps = vec![0.0; eval_steps.len()];
            let record = |k: usize, a: &[f64], b: &[f64], gaps: &mut [f64]| {
                for (gi, &es) in eval_steps.iter().enumerate() {
                    if es == k {
                        gaps[gi] = a
                            .iter()
                            .zip(b.iter())
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum::<f64>();
                    }
                }
            };
            record(0, &a, &b, &mut gaps);
            for k in 0..steps {
                let tk = t + dt * k as f64;
                drv.increment(path as u64, k as u64, dt, &mut dw);
                let mut advance = |state: &mut Vec<f64>| -> Result<(), SimError> {
                    p.eval_drift(tk, state, &mut mu)
                        .map_err(|source| SimError::Eval { path, step: k, source })?;
                    p.eval_diffusion(tk, state, &mut sigma)
                        .map_err(|source| SimError::Eval { path, step: k, source })?;
                    for i in 0..d {
                        let mut acc = state[i] + mu[i] * dt;
                        for (s, w) in sigma[i * m..(i + 1) * m].iter().zip(dw.iter()) {
                            acc += s * w;
                        }
                        next[i] = acc;
                    }
                    state.copy_from_slice(&next);
                    Ok(())
                };
                advance(&mut a)?;
                if k >= start2 {
                    advance(&mut b)?;
                }
                record(k + 1, &a, &b, &mut gaps);
            }
            Ok::<_, SimError>(gaps)
        })?;

    // sup over [0, T] of the coefficient norms frozen at x2.
    let sup = coefficient_sup_at(p, x2)?;
    let dist = x
        .iter()
        .zip(x2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let tt = p.horizon;
    let bound = 9.0
        * (dist + (t2 - t).abs().sqrt()).powi(2)
        * (1.0 + tt.sqrt() * sup.0 + sup.1).powi(2)
        * (6.0 * l_coef * l_coef * tt * (tt + 1.0)).exp();

    let gaps = eval_steps
        .iter()
        .enumerate()
        .map(|(gi, &es)| {
            let vals: Vec<f64> = per_path.iter().map(|g| g[gi]).collect();
            (t + dt * es as f64, MeanSe::from_values(&vals), bound)
        })
        .collect();
    Ok(StabilityReport {
        gaps,
        lipschitz_used: l_coef,
    })
}

/// `(sup_r |mu(r, x)|, sup_r |sigma(r, x)|_F)` over `r` in `[0, T]`.
/// Exact for autonomous coefficients; dense 1001-point scan otherwise.
fn coefficient_sup_at(p: &ProblemSpec, x: &[f64]) -> Result<(f64, f64), SimError> {
    let mut mu = vec![0.0; p.d];
    let mut sigma = vec![0.0; p.d * p.m];
    let times: Vec<f64> = if p.time_dependent {
        (0..=1000).map(|i| p.horizon * i as f64 / 1000.0).collect()
    } else {
        vec![0.0]
    };
    let mut sup_mu = 0.0f64;
    let mut sup_sigma = 0.0f64;
    for &t in &times {
        p.eval_drift(t, x, &mut mu)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        p.eval_diffusion(t, x, &mut sigma)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        sup_mu = sup_mu.max(mu.iter().map(|a| a * a).sum::<f64>().sqrt());
        sup_sigma = sup_sigma.max(sigma.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    Ok((sup_mu, sup_sigma))
}

/// Empirical global Lipschitz constant of `(mu, sigma)` jointly, estimated by
/// sampling pairs in a box of the given half-width around the origin.
pub fn empirical_coefficient_lipschitz(
    p: &ProblemSpec,
    half_width: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64, SimError> {
    let mut rng = crate::rng::SubRng::from_key(&[seed, 0x11b5]);
    let d = p.d;
    let mut best = 0.0f64;
    let mut mu_a = vec![0.0; d];
    let mut mu_b = vec![0.0; d];
    let mut sg_a = vec![0.0; d * p.m];
    let mut sg_b = vec![0.0; d * p.m];
    let times: Vec<f64> = if p.time_dependent {
        (0..=10).map(|i| p.horizon * i as f64 / 10.0).collect()
    } else {
        vec![0.0]
    };
    for k in 0..n_pairs {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for i in 0..d {
            a[i] = rng.next_range(-half_width, half_width);
            // Mix long-range and short-range pairs to capture both secant
            // and near-derivative slopes.
            b[i] = if k % 2 == 0 {
                rng.next_range(-half_width, half_width)
            } else {
                a[i] + rng.next_range(-1e-4, 1e-4)
            };
        }
        let dist = a
            .iter()
            .zip(b.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        let t = times[k % times.len()];
        p.eval_drift(t, &a, &mut mu_a)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        p.eval_drift(t, &b, &mut mu_b)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        p.eval_diffusion(t, &a, &mut sg_a)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        p.eval_diffusion(t, &b, &mut sg_b)
            .map_err(|source| SimError::Eval { path: 0, step: 0, source })?;
        let dmu = mu_a
            .iter()
            .zip(mu_b.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let dsg = sg_a
            .iter()
            .zip(sg_b.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        best = best.max((dmu + dsg) / dist);
    }
    Ok(best)
}

/// Evaluate `g(X_T)` mean over a batch, for quick Feynman-Kac checks.
pub fn terminal_mean(p: &ProblemSpec, batch: &PathBatch) -> Result<MeanSe, Box<EvalError>> {
    let mut values = Vec::with_capacity(batch.n_paths);
    for path in 0..batch.n_paths {
        let x = batch.state(path, batch.steps);
        values.push(p.terminal.eval(&EvalEnv::tx(p.horizon, x))?);
    }
    Ok(MeanSe::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build, Domain, ProblemInput};

    fn problem(drift: &str, sigma: &str) -> ProblemSpec {
        build(&ProblemInput {
            d: 1,
            m: 1,
            horizon: 1.0,
            drift: vec![drift.into()],
            diffusion: vec![sigma.into()],
            nonlinearity: Some("0".into()),
            terminal: Some("norm2".into()),
            lipschitz: Some(1.0),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn degenerate_sde_stays_constant() {
        let p = problem("0", "0");
        let drv = BrownianDriver::new(1);
        let batch = simulate(&p, 0.0, &[0.7], 16, 8, &drv).unwrap();
        for path in 0..8 {
            for k in 0..=16 {
                assert_eq!(batch.state(path, k), &[0.7]);
            }
            assert!(!batch.exited[path]);
        }
    }

    #[test]
    fn brownian_terminal_moments() {
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
        let drv = BrownianDriver::new(7);
        let n = 100_000;
        let batch = simulate(&p, 0.0, &[0.0], 1, n, &drv).unwrap();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for path in 0..n {
            let v = batch.state(path, 1)[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        // X_T ~ N(0, 1): mean within 3/sqrt(n), variance within 0.02.
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn deterministic_ou_matches_exponential() {
        // x' = -x, x(0) = 1: X_T = exp(-1), Euler error O(dt).
        let p = problem("-x1", "0");
        let drv = BrownianDriver::new(1);
        let batch = simulate(&p, 0.0, &[1.0], 10_000, 1, &drv).unwrap();
        let x_t = batch.state(0, 10_000)[0];
        assert!(
            (x_t - (-1.0f64).exp()).abs() < 2e-4,
            "X_T = {x_t}, expected {}",
            (-1.0f64).exp()
        );
    }

    #[test]
    fn identical_problems_couple_bitwise() {
        let p = problem("x1*(1-norm2)", "1");
        let drv = BrownianDriver::new(11);
        let (a, b) = simulate_coupled(&p, &p, 0.0, &[0.5], 64, 16, &drv).unwrap();
        assert_eq!(
            a.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn constant_drift_offset_diverges_linearly() {
        let p1 = problem("0", "0");
        let p2 = problem("1", "0");
        let drv = BrownianDriver::new(3);
        let (a, b) = simulate_coupled(&p1, &p2, 0.0, &[0.0], 10, 1, &drv).unwrap();
        let dt = 0.1;
        for k in 0..=10 {
            let diff = b.state(0, k)[0] - a.state(0, k)[0];
            assert!((diff - dt * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    #[cfg(feature = "parallel")]
    fn simulation_is_worker_count_independent() {
        let p = problem("-x1 + sin(t)", "1");
        let drv = BrownianDriver::new(5);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| simulate(&p, 0.0, &[0.3], 100, 64, &drv).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(
            a.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn freeze_outside_box_domain() {
        let mut p = problem("0", "1");
        p.domain = Domain::AxisBox {
            lo: vec![-0.5],
            hi: vec![0.5],
        };
        let drv = BrownianDriver::new(9);
        let batch = simulate(&p, 0.0, &[0.0], 200, 64, &drv).unwrap();
        for path in 0..batch.n_paths {
            if let Some(fz) = batch.frozen_from[path] {
                let held = batch.state(path, fz as usize).to_vec();
                assert!(p.domain.contains(&held), "frozen state left the domain");
                for k in fz as usize..=batch.steps {
                    assert_eq!(batch.state(path, k), held.as_slice());
                }
                assert!(batch.exited[path]);
            }
        }
        // With sigma = 1 over [0,1] and a +-0.5 box, exits are near-certain.
        assert!(batch.exited.iter().filter(|&&e| e).count() > 32);
    }

    #[test]
    fn stability_gap_trivial_cases() {
        let p = problem("0", "0");
        let drv = BrownianDriver::new(13);
        // Same start: gap identically zero.
        let rep = stability_gap(&p, 0.0, &[0.2], 0.0, &[0.2], &[1.0], 50, 100, &drv, 1.0).unwrap();
        assert_eq!(rep.gaps[0].1.mean, 0.0);
        // Frozen dynamics: gap = |x - x2|^2 up to summation dust.
        let rep = stability_gap(&p, 0.0, &[0.0], 0.0, &[0.3], &[1.0], 50, 100, &drv, 1.0).unwrap();
        assert!((rep.gaps[0].1.mean - 0.09).abs() < 1e-14);
        assert!(rep.gaps[0].1.se < 1e-14);
    }

    #[test]
    fn escape_guard_flags_exploding_paths() {
        // Strongly super-linear drift explodes quickly from x = 4.
        let p = problem("x1^9", "0");
        let drv = BrownianDriver::new(1);
        let batch = simulate(&p, 0.0, &[4.0], 400, 1, &drv).unwrap();
        assert!(batch.escaped[0]);
        assert!(batch.exited[0]);
        let fz = batch.frozen_from[0].unwrap() as usize;
        let held = batch.state(0, fz)[0];
        assert!(held.is_finite() && held.abs() <= ESCAPE_GUARD);
    }
}
