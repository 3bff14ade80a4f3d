//! Browser demo bindings: three interactive views onto the solver.
//!
//! Every export returns a JSON string (errors come back as
//! `{"error": "..."}`), so the page needs nothing beyond `JSON.parse`.
//! Budgets are kept at browser scale; the demo runs single-threaded.
//!
//! Build with `wasm-pack build crates/sfpe-wasm --target web` and serve
//! `crates/sfpe-wasm/www/` next to the generated `pkg/`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use sfpe_core::grid::{GridFunction, GridSpec};
use sfpe_core::lyapunov::LyapunovSpec;
use sfpe_core::oracle;
use sfpe_core::problem::{build, ProblemInput};
use sfpe_core::rng::BrownianDriver;
use sfpe_core::sde::simulate;
use sfpe_core::solver::{
    apply_phi, contraction_ratio, picard_solve, McConfig, Quadrature,
};

fn or_error(result: Result<String, String>) -> String {
    result.unwrap_or_else(|message| json!({ "error": message }).to_string())
}

fn family_problem(family: &str, f: &str, g: &str, lipschitz: f64) -> Result<sfpe_core::ProblemSpec, String> {
    build(&ProblemInput {
        family: Some(family.to_string()),
        d: 1,
        m: 1,
        horizon: 1.0,
        nonlinearity: Some(f.to_string()),
        terminal: Some(g.to_string()),
        lipschitz: Some(lipschitz),
        ..Default::default()
    })
    .map_err(|e| e.to_string())
}

/// Solve the heat benchmark (Brownian motion, `g = |x|^2`, `f = 0`) on a
/// small 1-d grid and return the `u(0, x)` curve next to the closed form
/// `x^2 + T` it must reproduce.
#[wasm_bindgen]
pub fn heat_solve(seed: u64, n_paths: usize, knots: usize) -> String {
    or_error(heat_solve_impl(seed, n_paths, knots))
}

fn heat_solve_impl(seed: u64, n_paths: usize, knots: usize) -> Result<String, String> {
    let knots = knots.clamp(5, 201);
    let n_paths = n_paths.clamp(100, 200_000);
    let p = family_problem("brownian", "0", "norm2", 1.0)?;
    let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
    let grid = GridSpec::new(5, vec![-4.0], vec![4.0], vec![knots]).map_err(|e| e.to_string())?;
    let mc = McConfig {
        n_paths,
        steps: 20,
        seed,
        quadrature: Quadrature::Left,
    };
    let report = picard_solve(&p, &weight, &grid, &mc, None, 1e-3, 5).map_err(|e| e.to_string())?;
    let u = &report.final_u;
    let mut xs = Vec::with_capacity(knots);
    let mut u0 = Vec::with_capacity(knots);
    let mut truth = Vec::with_capacity(knots);
    let mut x = vec![0.0];
    for j in 0..u.spec.spatial_nodes() {
        u.node_point(j, &mut x);
        xs.push(x[0]);
        u0.push(u.node_value(0, j));
        truth.push(oracle::heat_quadratic(0.0, &x, 1.0));
    }
    Ok(json!({
        "xs": xs,
        "u0": u0,
        "oracle": truth,
        "residual": report.residual,
        "converged": report.converged,
    })
    .to_string())
}

/// Measure the Picard map's contraction ratio for the linear-nonlinearity
/// benchmark across a list of weights `lambda`, against the `L / lambda`
/// envelope. The ratio must sit below 1/2 at `lambda = 2L`.
#[wasm_bindgen]
pub fn contraction_sweep(seed: u64, n_paths: usize, lambdas_csv: String) -> String {
    or_error(contraction_sweep_impl(seed, n_paths, &lambdas_csv))
}

fn contraction_sweep_impl(seed: u64, n_paths: usize, lambdas_csv: &str) -> Result<String, String> {
    let n_paths = n_paths.clamp(100, 50_000);
    let lambdas: Vec<f64> = lambdas_csv
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad lambda `{s}`")))
        .collect::<Result<_, _>>()?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err("lambdas must be positive".into());
    }
    let p = family_problem("brownian", "v", "norm2", 1.0)?;
    let weight = LyapunovSpec::polynomial(2.0, 1.0, 1);
    let grid = GridSpec::new(4, vec![-4.0], vec![4.0], vec![13]).map_err(|e| e.to_string())?;
    let mc = McConfig {
        n_paths,
        steps: 20,
        seed,
        quadrature: Quadrature::Left,
    };
    let zero = GridFunction::zeros(grid.clone(), p.horizon);
    let first = apply_phi(&p, &zero, &mc).map_err(|e| e.to_string())?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let rep = contraction_ratio(&p, &first, &zero, &weight, lambda, &mc)
            .map_err(|e| e.to_string())?;
        rows.push(json!({
            "lambda": lambda,
            "measured": rep.ratio,
            "bound": p.lipschitz / lambda,
        }));
    }
    Ok(json!({ "rows": rows }).to_string())
}

/// Simulate a bundle of trajectories for one builtin family and return them
/// for plotting: `{times: [...], paths: [[...], ...], frozen: [...]}`.
#[wasm_bindgen]
pub fn sde_paths(family: String, seed: u64, n_paths: usize, steps: usize, x0: f64) -> String {
    or_error(sde_paths_impl(&family, seed, n_paths, steps, x0))
}

fn sde_paths_impl(
    family: &str,
    seed: u64,
    n_paths: usize,
    steps: usize,
    x0: f64,
) -> Result<String, String> {
    let n_paths = n_paths.clamp(1, 64);
    let steps = steps.clamp(10, 2_000);
    let p = family_problem(family, "0", "norm2", 1.0)?;
    let drv = BrownianDriver::new(seed);
    let batch = simulate(&p, 0.0, &[x0], steps, n_paths, &drv).map_err(|e| e.to_string())?;
    let times: Vec<f64> = (0..=steps).map(|k| batch.time(k)).collect();
    let paths: Vec<Vec<f64>> = (0..n_paths)
        .map(|path| (0..=steps).map(|k| batch.state(path, k)[0]).collect())
        .collect();
    Ok(json!({
        "times": times,
        "paths": paths,
        "frozen": batch.frozen_from,
    })
    .to_string())
}
