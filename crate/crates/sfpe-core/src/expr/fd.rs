//! Central finite differences for expression gradients and Hessians.
//!
//! Step sizes follow the usual truncation/rounding balance: eps^(1/3) per
//! coordinate for first derivatives, eps^(1/4) for second derivatives, both
//! scaled by the coordinate magnitude.

use super::{EvalEnv, EvalError, ExprAst};

/// cbrt(f64::EPSILON), the default relative step for first derivatives.
pub const GRAD_STEP_FACTOR: f64 = 6.055454452393343e-6;

/// (f64::EPSILON)^(1/4), the default relative step for second derivatives.
pub const HESS_STEP_FACTOR: f64 = 1.2207031250000002e-4;

fn step(x: f64, factor: f64) -> f64 {
    x.abs().max(1.0) * factor
}

/// Central-difference gradient in the spatial variables.
///
/// `h` overrides the per-coordinate default `max(1, |x_i|) * eps^(1/3)`.
pub fn grad_fd(
    ast: &ExprAst,
    env: &EvalEnv,
    h: Option<f64>,
) -> Result<Vec<f64>, Box<EvalError>> {
    let d = env.x.len();
    let mut xs = env.x.to_vec();
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let xi = xs[i];
        let hi = h.unwrap_or_else(|| step(xi, GRAD_STEP_FACTOR));
        xs[i] = xi + hi;
        let up = eval_at(ast, env, &xs)?;
        xs[i] = xi - hi;
        let dn = eval_at(ast, env, &xs)?;
        xs[i] = xi;
        grad[i] = (up - dn) / (2.0 * hi);
    }
    Ok(grad)
}

/// Central-difference Hessian in the spatial variables, returned as a flat
/// row-major `d*d` matrix. Symmetric by construction: each off-diagonal
/// cross stencil is evaluated once and mirrored.
pub fn hess_fd(
    ast: &ExprAst,
    env: &EvalEnv,
    h: Option<f64>,
) -> Result<Vec<f64>, Box<EvalError>> {
    let d = env.x.len();
    let mut xs = env.x.to_vec();
    let mut hess = vec![0.0; d * d];
    let center = eval_at(ast, env, &xs)?;
    let steps: Vec<f64> = (0..d)
        .map(|i| h.unwrap_or_else(|| step(xs[i], HESS_STEP_FACTOR)))
        .collect();

    for i in 0..d {
        let xi = xs[i];
        let hi = steps[i];
        xs[i] = xi + hi;
        let up = eval_at(ast, env, &xs)?;
        xs[i] = xi - hi;
        let dn = eval_at(ast, env, &xs)?;
        xs[i] = xi;
        hess[i * d + i] = (up - 2.0 * center + dn) / (hi * hi);

        for j in (i + 1)..d {
            let xj = xs[j];
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| -> Result<f64, Box<EvalError>> {
                xs[i] = xi + si * hi;
                xs[j] = xj + sj * hj;
                let v = eval_at(ast, env, &xs);
                xs[i] = xi;
                xs[j] = xj;
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            let cross = (pp - pm - mp + mm) / (4.0 * hi * hj);
            hess[i * d + j] = cross;
            hess[j * d + i] = cross;
        }
    }
    Ok(hess)
}

fn eval_at(ast: &ExprAst, env: &EvalEnv, xs: &[f64]) -> Result<f64, Box<EvalError>> {
    let shifted = EvalEnv { x: xs, ..*env };
    ast.eval(&shifted)
}
