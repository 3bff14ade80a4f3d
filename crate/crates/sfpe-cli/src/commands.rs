//! Subcommand implementations. Each returns the process exit code: 0 for
//! success/pass, 2 for max_iter without convergence, 3 for a failed check;
//! errors bubble up and exit 1.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use thiserror::Error;

use sfpe_core::grid::GridFunction;
use sfpe_core::lyapunov::{check_generator, supermartingale_test, LyapunovError};
use sfpe_core::problem::{self, ProblemSpec};
use sfpe_core::rng::BrownianDriver;
use sfpe_core::sde::{simulate_coupled, PathBatch, SimError};
use sfpe_core::solver::{
    apply_phi, contraction_ratio, nested_estimate, picard_solve, NestedParams, SolveError,
};

use crate::config::{self, ConfigError, RawConfig};
use crate::CommonArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Problem(#[from] problem::BuildError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

type CmdResult = Result<u8, CliError>;

fn load(common: &CommonArgs) -> Result<RawConfig, CliError> {
    Ok(RawConfig::load(&common.config)?)
}

fn out_dir(common: &CommonArgs, cfg: &RawConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.get("output", "dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn build_problem(cfg: &RawConfig, section: &str) -> Result<ProblemSpec, CliError> {
    Ok(problem::build(&config::problem_input(cfg, section)?)?)
}

fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn solve(common: &CommonArgs) -> CmdResult {
    let cfg = load(common)?;
    let p = build_problem(&cfg, "problem")?;
    let weight = config::lyapunov_spec(&cfg, p.d)?;
    let grid = config::grid_spec(&cfg, p.d)?;
    let mc = config::mc_config(&cfg, common.seed)?;
    let lambda = match cfg.get("solver", "lambda") {
        None | Some("auto") => None,
        Some(_) => Some(cfg.get_f64("solver", "lambda")?.unwrap()),
    };
    let tol = cfg.get_f64("solver", "tol")?.unwrap_or(1e-3);
    let max_iter = cfg.get_usize("solver", "max_iter")?.unwrap_or(20);

    let report = picard_solve(&p, &weight, &grid, &mc, lambda, tol, max_iter)?;

    let dir = out_dir(common, &cfg);
    // The timestamp is the only non-reproducible field and stays isolated on
    // its own line of the pretty-printed report.
    let report_json = json!({
        "command": "solve",
        "unix_timestamp": unix_timestamp(),
        "seed": mc.seed,
        "lambda": report.lambda,
        "tolerance": report.tolerance,
        "converged": report.converged,
        "iterations": report.iterations,
        "residual": report.residual,
    });
    let json_text = serde_json::to_string_pretty(&report_json).expect("report serializes");
    write_file(&dir.join("solve_report.json"), &json_text)?;
    write_file(&dir.join("solution.csv"), &report.final_u.to_csv())?;

    let verbosity = cfg.get_i64("output", "verbosity")?.unwrap_or(1);
    if verbosity >= 1 {
        println!(
            "solve: converged={} iterations={} residual={:.3e} lambda={} -> {}",
            report.converged,
            report.iterations.len(),
            report.residual,
            report.lambda,
            dir.display()
        );
    }
    if verbosity >= 2 {
        for (i, it) in report.iterations.iter().enumerate() {
            match it.ratio {
                Some(r) => println!(
                    "  iter {:>2}: delta {:.6e} ratio {:.4} ({:.2}s)",
                    i + 1,
                    it.delta,
                    r,
                    it.wall_secs
                ),
                None => println!(
                    "  iter {:>2}: delta {:.6e} ({:.2}s)",
                    i + 1,
                    it.delta,
                    it.wall_secs
                ),
            }
        }
    } else if verbosity >= 1 {
        let deltas: Vec<String> = report
            .iterations
            .iter()
            .map(|i| format!("{:.3e}", i.delta))
            .collect();
        println!("deltas: [{}]", deltas.join(", "));
    }
    Ok(if report.converged { 0 } else { 2 })
}

pub fn estimate(
    common: &CommonArgs,
    t: Option<f64>,
    x: Option<&str>,
    depth: Option<usize>,
    widths: Option<&str>,
) -> CmdResult {
    let cfg = load(common)?;
    let p = build_problem(&cfg, "problem")?;
    let t = match t {
        Some(t) => t,
        None => cfg.get_f64("estimate", "t")?.unwrap_or(0.0),
    };
    let x: Vec<f64> = match x {
        Some(text) => parse_f64_list(text)?,
        None => cfg
            .get_f64_list("estimate", "x")?
            .unwrap_or_else(|| vec![0.0; p.d]),
    };
    let depth = match depth {
        Some(d) => d,
        None => cfg.get_usize("estimate", "depth")?.unwrap_or(3),
    };
    let widths = match widths {
        Some(text) => parse_widths(text)?,
        None => match cfg.get("estimate", "widths") {
            Some(text) => parse_widths(text)?,
            None => vec![(100, 100)],
        },
    };
    let params = NestedParams {
        depth,
        widths: widths.clone(),
        steps: cfg.get_usize("estimate", "steps")?.unwrap_or(20),
        max_work: cfg
            .get_i64("estimate", "max_work")?
            .map(|v| v.max(0) as u64)
            .unwrap_or(1 << 33),
    };
    let seed = match common.seed {
        Some(s) => s,
        None => cfg
            .get_i64("solver", "seed")?
            .ok_or_else(|| CliError::Invalid("seed required (solver.seed or --seed)".into()))?
            as u64,
    };
    let drv = BrownianDriver::new(seed);
    let est = nested_estimate(&p, t, &x, &params, &drv)?;
    let out = json!({
        "estimate": est.value,
        "work": est.work,
        "depth": depth,
        "widths": widths.iter().map(|&(g, f)| vec![g, f]).collect::<Vec<_>>(),
    });
    println!("{out}");
    Ok(0)
}

pub fn check_lyapunov(common: &CommonArgs) -> CmdResult {
    let cfg = load(common)?;
    let p = build_problem(&cfg, "problem")?;
    let weight = config::lyapunov_spec(&cfg, p.d)?;
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.get_i64("solver", "seed")?.unwrap_or(1) as u64,
    };

    let points = cfg.get_usize("check", "points")?.unwrap_or(10_000);
    let gen = check_generator(&p, &weight, points, seed, &[])?;
    println!(
        "generator: max value {:.6e} at (t={}, x={:?}), violations {}/{}",
        gen.max_value, gen.worst_point.0, gen.worst_point.1, gen.violations, gen.samples
    );

    let sm_t = cfg.get_f64("check", "sm_t")?.unwrap_or(0.0);
    let sm_s = cfg.get_f64("check", "sm_s")?.unwrap_or(p.horizon);
    let sm_x = cfg
        .get_f64_list("check", "sm_x")?
        .unwrap_or_else(|| vec![0.0; p.d]);
    let sm_paths = cfg.get_usize("check", "sm_paths")?.unwrap_or(20_000);
    let sm_steps = cfg.get_usize("check", "sm_steps")?.unwrap_or(100);
    let kappa = cfg.get_f64("check", "kappa")?;
    let drv = BrownianDriver::new(seed).with_stream(1);
    let sm = supermartingale_test(&p, &weight, sm_t, &sm_x, sm_s, sm_steps, sm_paths, &drv, kappa)?;
    println!(
        "supermartingale: mean {:.6} vs bound {:.6} (margin {:+.3e}, se {:.2e}, allowance {:.2e})",
        sm.mean,
        sm.bound,
        sm.bound - sm.mean,
        sm.se,
        sm.allowance
    );

    if gen.pass && sm.pass {
        println!("check-lyapunov: PASS");
        Ok(0)
    } else {
        println!("check-lyapunov: FAIL");
        Ok(3)
    }
}

pub fn verify_contraction(common: &CommonArgs, sweep_flag: Option<&str>) -> CmdResult {
    let cfg = load(common)?;
    let p = build_problem(&cfg, "problem")?;
    let weight = config::lyapunov_spec(&cfg, p.d)?;
    let grid = config::grid_spec(&cfg, p.d)?;
    let mut mc = config::mc_config(&cfg, common.seed)?;
    if let Some(paths) = cfg.get_usize("contraction", "paths")? {
        mc.n_paths = paths;
    }
    if let Some(steps) = cfg.get_usize("contraction", "steps")? {
        mc.steps = steps;
    }
    let sweep: Vec<f64> = match sweep_flag {
        Some(text) => parse_f64_list(text)?,
        None => cfg
            .get_f64_list("contraction", "lambda_sweep")?
            .unwrap_or_else(|| vec![2.0 * p.lipschitz, 4.0 * p.lipschitz, 20.0 * p.lipschitz]),
    };

    // Candidates: the first Picard iterate against the zero function.
    let zero = GridFunction::zeros(grid.clone(), p.horizon);
    let first = apply_phi(&p, &zero, &mc)?;

    let mut csv = String::from("lambda,measured,bound\n");
    for &lambda in &sweep {
        let rep = contraction_ratio(&p, &first, &zero, &weight, lambda, &mc)?;
        let bound = p.lipschitz / lambda;
        csv.push_str(&format!("{lambda:?},{:?},{bound:?}\n", rep.ratio));
        println!(
            "lambda = {lambda}: measured {:.4}, envelope L/lambda = {bound:.4}",
            rep.ratio
        );
    }
    let dir = out_dir(common, &cfg);
    write_file(&dir.join("contraction.csv"), &csv)?;
    Ok(0)
}

pub fn couple_test(common: &CommonArgs, dump: Option<&Path>) -> CmdResult {
    let cfg = load(common)?;
    let p1 = build_problem(&cfg, "problem")?;
    let p2 = build_problem(&cfg, "problem2")?;
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.get_i64("solver", "seed")?.unwrap_or(1) as u64,
    };
    let t0 = cfg.get_f64("couple", "t0")?.unwrap_or(0.0);
    let x0 = cfg
        .get_f64_list("couple", "x0")?
        .unwrap_or_else(|| vec![0.0; p1.d]);
    let steps = cfg.get_usize("couple", "steps")?.unwrap_or(1_000);
    let paths = cfg.get_usize("couple", "paths")?.unwrap_or(1_000);
    let radius = cfg.get_f64("couple", "region_radius")?.unwrap_or(2.0);

    let drv = BrownianDriver::new(seed).with_stream(7);
    let (a, b) = simulate_coupled(&p1, &p2, t0, &x0, steps, paths, &drv)?;
    if let Some(prefix) = dump {
        write_file(&prefix.with_extension("a.csv"), &batch_csv(&a))?;
        write_file(&prefix.with_extension("b.csv"), &batch_csv(&b))?;
    }

    // Coupling locality: bitwise agreement up to the first grid index at
    // which either trajectory leaves the ball of the configured radius.
    let mut max_diff_inside = 0.0f64;
    let mut first_divergence: Option<(usize, usize)> = None;
    'outer: for path in 0..paths {
        for k in 0..=steps {
            let sa = a.state(path, k);
            let sb = b.state(path, k);
            let bitwise_equal = sa
                .iter()
                .zip(sb.iter())
                .all(|(u, v)| u.to_bits() == v.to_bits());
            if !bitwise_equal {
                let diff = sa
                    .iter()
                    .zip(sb.iter())
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                max_diff_inside = max_diff_inside.max(diff);
                first_divergence = Some((path, k));
                break 'outer;
            }
            let norm = sa.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                // Left the shared-coefficient region; divergence is allowed
                // from the next step on.
                break;
            }
        }
    }

    // At-rest suite: applies when both problems' coefficients vanish at the
    // start point; every path must then hold x0 bitwise.
    let at_rest_applicable =
        coefficients_vanish_at(&p1, t0, &x0)? && coefficients_vanish_at(&p2, t0, &x0)?;
    let mut at_rest_ok = true;
    if at_rest_applicable {
        'rest: for (label, batch) in [("problem", &a), ("problem2", &b)] {
            for path in 0..paths {
                for k in 0..=steps {
                    let state = batch.state(path, k);
                    if state
                        .iter()
                        .zip(x0.iter())
                        .any(|(u, v)| u.to_bits() != v.to_bits())
                    {
                        at_rest_ok = false;
                        println!("at-rest: {label} path {path} moved at step {k}");
                        break 'rest;
                    }
                }
            }
        }
        println!("at-rest: {}", if at_rest_ok { "exact" } else { "FAIL" });
    } else {
        println!("at-rest: not applicable (coefficients nonzero at start point)");
    }

    match first_divergence {
        None if at_rest_ok => {
            println!("coupling: exact (max diff 0) over {paths} paths x {steps} steps");
            Ok(0)
        }
        None => Ok(3),
        Some((path, step)) => {
            println!(
                "coupling: FAIL, first divergence at path {path}, step {step} (|diff| {max_diff_inside:.3e}) inside radius {radius}"
            );
            Ok(3)
        }
    }
}

fn coefficients_vanish_at(p: &ProblemSpec, t: f64, x: &[f64]) -> Result<bool, CliError> {
    let mut mu = vec![0.0; p.d];
    let mut sigma = vec![0.0; p.d * p.m];
    p.eval_drift(t, x, &mut mu)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    p.eval_diffusion(t, x, &mut sigma)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(mu.iter().all(|v| *v == 0.0) && sigma.iter().all(|v| *v == 0.0))
}

fn batch_csv(batch: &PathBatch) -> String {
    let mut out = String::from("path,step,t");
    for i in 1..=batch.d {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for path in 0..batch.n_paths {
        for k in 0..=batch.steps {
            out.push_str(&format!("{path},{k},{:?}", batch.time(k)));
            for v in batch.state(path, k) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
    }
    out
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Invalid(format!("`{p}` is not a number")))
        })
        .collect()
}

pub(crate) fn parse_widths(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(';')
        .map(|pair| {
            let items: Vec<&str> = pair.split(',').map(str::trim).collect();
            match items.as_slice() {
                [g, f] => {
                    let g = g
                        .parse()
                        .map_err(|_| CliError::Invalid(format!("bad width `{pair}`")))?;
                    let f = f
                        .parse()
                        .map_err(|_| CliError::Invalid(format!("bad width `{pair}`")))?;
                    Ok((g, f))
                }
                [one] => {
                    let n: usize = one
                        .parse()
                        .map_err(|_| CliError::Invalid(format!("bad width `{pair}`")))?;
                    Ok((n, n))
                }
                _ => Err(CliError::Invalid(format!(
                    "widths must be `ng,nf` pairs separated by `;`, got `{pair}`"
                ))),
            }
        })
        .collect()
}
