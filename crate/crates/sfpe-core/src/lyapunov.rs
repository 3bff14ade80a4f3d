//! Lyapunov weights: construction, the generator inequality, the
//! exponential time-tilt, and the pathwise supermartingale test.
//!
//! A weight can be given in space-time form `V(t, x)` (certified by
//! `dV/dt + 1/2 Tr(sigma sigma^T Hess V) + <mu, grad V> <= 0`) or in
//! elliptic form `V(x)` with a decay rate `rho` (certified by
//! `1/2 Tr(sigma sigma^T Hess V) + <mu, grad V> <= rho V`). The elliptic
//! form acts as the space-time weight `e^(-rho t) V(x)`; the tilt is an
//! exact algebraic rewrite, which `generator_value` exploits.

use thiserror::Error;

use crate::expr::{self, EvalEnv, EvalError, ExprAst, Role};
use crate::problem::ProblemSpec;
use crate::rng::{BrownianDriver, SubRng};
use crate::sde::{self, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovForm {
    /// `V(t, x)`, generator must be nonpositive.
    SpaceTime,
    /// `V(x)` with decay rate `rho`; effective weight `e^(-rho t) V(x)`.
    Elliptic,
}

/// Analytic derivative data for the builtin polynomial family
/// `V(x) = (1 + |x|^2)^(p/2)`.
#[derive(Debug, Clone, Copy)]
pub struct PolynomialFamily {
    pub p: f64,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    pub expr: ExprAst,
    pub form: LyapunovForm,
    /// Decay rate; zero for space-time form.
    pub rho: f64,
    /// Set for the builtin polynomial family; enables analytic gradients.
    pub polynomial: Option<PolynomialFamily>,
}

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("Lyapunov function is not positive at t={t}, x={x:?} (value {value})")]
    NonPositive { t: f64, x: Vec<f64>, value: f64 },
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl LyapunovSpec {
    /// Space-time weight from an expression in `(t, x)`.
    pub fn space_time(expr: ExprAst) -> Self {
        LyapunovSpec {
            expr,
            form: LyapunovForm::SpaceTime,
            rho: 0.0,
            polynomial: None,
        }
    }

    /// Elliptic weight `e^(-rho t) V(x)` from an expression in `x`.
    pub fn elliptic(expr: ExprAst, rho: f64) -> Self {
        LyapunovSpec {
            expr,
            form: LyapunovForm::Elliptic,
            rho,
            polynomial: None,
        }
    }

    /// The builtin polynomial family `V(x) = (1 + |x|^2)^(p/2)` with
    /// `rho = (p c / 2) max(p + 1, 3)`, valid whenever the coefficients
    /// satisfy the coercivity bound with constant `c`.
    pub fn polynomial(p: f64, c: f64, d: usize) -> Self {
        assert!(p > 0.0 && c > 0.0, "polynomial family needs p, c > 0");
        let text = format!("(1 + norm2)^({:?})", p / 2.0);
        let expr = expr::parse(&text, Role::Lyapunov, d).expect("family expression parses");
        LyapunovSpec {
            expr,
            form: LyapunovForm::Elliptic,
            rho: 0.5 * p * c * (p + 1.0).max(3.0),
            polynomial: Some(PolynomialFamily { p, c }),
        }
    }

    /// Spatial factor `V(x)` for elliptic form, or `V(t, x)` for space-time.
    fn base_value(&self, t: f64, x: &[f64]) -> Result<f64, LyapunovError> {
        let v = self.expr.eval(&EvalEnv::tx(t, x))?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(LyapunovError::NonPositive {
                t,
                x: x.to_vec(),
                value: v,
            })
        }
    }

    /// The effective space-time weight at `(t, x)`: the tilt `e^(-rho t)`
    /// multiplies the spatial factor for elliptic-form specs.
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64, LyapunovError> {
        match self.form {
            LyapunovForm::SpaceTime => self.base_value(t, x),
            LyapunovForm::Elliptic => Ok((-self.rho * t).exp() * self.base_value(t, x)?),
        }
    }

    /// log of the weight, overflow-safe for strong tilts.
    pub fn log_value(&self, t: f64, x: &[f64]) -> Result<f64, LyapunovError> {
        match self.form {
            LyapunovForm::SpaceTime => Ok(self.base_value(t, x)?.ln()),
            LyapunovForm::Elliptic => Ok(-self.rho * t + self.base_value(t, x)?.ln()),
        }
    }

    /// Spatial gradient of the *untilted* factor. Analytic for the
    /// polynomial family, central differences otherwise.
    pub fn grad_x(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, LyapunovError> {
        if let Some(fam) = self.polynomial {
            let norm2: f64 = x.iter().map(|a| a * a).sum();
            let v = (1.0 + norm2).powf(fam.p / 2.0);
            let scale = fam.p * v / (1.0 + norm2);
            return Ok(x.iter().map(|&xi| scale * xi).collect());
        }
        Ok(expr::grad_fd(&self.expr, &EvalEnv::tx(t, x), None)?)
    }

    /// Spatial Hessian of the untilted factor, flat row-major `d*d`.
    pub fn hess_x(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, LyapunovError> {
        if let Some(fam) = self.polynomial {
            let d = x.len();
            let norm2: f64 = x.iter().map(|a| a * a).sum();
            let v = (1.0 + norm2).powf(fam.p / 2.0);
            let one = 1.0 + norm2;
            let mut h = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut e = (fam.p - 2.0) * x[i] * x[j] / (one * one);
                    if i == j {
                        e += 1.0 / one;
                    }
                    h[i * d + j] = fam.p * v * e;
                }
            }
            return Ok(h);
        }
        Ok(expr::hess_fd(&self.expr, &EvalEnv::tx(t, x), None)?)
    }

    /// Time derivative of the space-time weight (finite difference; only
    /// meaningful for space-time form).
    fn dt_fd(&self, t: f64, x: &[f64]) -> Result<f64, LyapunovError> {
        let h = t.abs().max(1.0) * expr::GRAD_STEP_FACTOR;
        let up = self.expr.eval(&EvalEnv::tx(t + h, x))?;
        let dn = self.expr.eval(&EvalEnv::tx(t - h, x))?;
        Ok((up - dn) / (2.0 * h))
    }
}

/// The Kolmogorov generator applied to the effective space-time weight:
///
/// `dV/dt + 1/2 Tr(sigma sigma^T Hess_x V) + <mu, grad_x V>`.
///
/// For elliptic form this is computed through the exact tilt identity
/// `e^(-rho t) (-rho V + 1/2 Tr(sigma sigma^T Hess V) + <mu, grad V>)`.
/// Nonpositivity certifies the supermartingale property.
pub fn generator_value(
    p: &ProblemSpec,
    spec: &LyapunovSpec,
    t: f64,
    x: &[f64],
) -> Result<f64, LyapunovError> {
    let d = p.d;
    let m = p.m;
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d * m];
    p.eval_drift(t, x, &mut mu)?;
    p.eval_diffusion(t, x, &mut sigma)?;

    let grad = spec.grad_x(t, x)?;
    let hess = spec.hess_x(t, x)?;

    // 1/2 sum_k sigma_k^T H sigma_k over columns k of sigma.
    let mut trace = 0.0;
    for k in 0..m {
        for i in 0..d {
            let si = sigma[i * m + k];
            if si == 0.0 {
                continue;
            }
            for j in 0..d {
                trace += si * sigma[j * m + k] * hess[i * d + j];
            }
        }
    }
    let advect: f64 = mu.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();

    match spec.form {
        LyapunovForm::Elliptic => {
            let v = spec.base_value(t, x)?;
            Ok((-spec.rho * t).exp() * (-spec.rho * v + 0.5 * trace + advect))
        }
        LyapunovForm::SpaceTime => {
            spec.base_value(t, x)?;
            Ok(spec.dt_fd(t, x)? + 0.5 * trace + advect)
        }
    }
}

/// Outcome of sampling the generator inequality over the domain.
#[derive(Debug, Clone)]
pub struct GeneratorReport {
    pub samples: usize,
    pub max_value: f64,
    pub worst_point: (f64, Vec<f64>),
    pub violations: usize,
    pub pass: bool,
}

/// Sample the generator at Gaussian clouds around the origin (scales 1, 4,
/// 16, exercising both the core and the tail) plus caller probes, and report
/// the largest value. A point violates if the generator exceeds
/// `1e-7 * (1 + |V|)`.
pub fn check_generator(
    p: &ProblemSpec,
    spec: &LyapunovSpec,
    n_points: usize,
    seed: u64,
    probes: &[Vec<f64>],
) -> Result<GeneratorReport, LyapunovError> {
    assert!(n_points >= 1);
    let mut rng = SubRng::from_key(&[seed, 0x6e_47]);
    let scales = [1.0, 4.0, 16.0];
    let mut report = GeneratorReport {
        samples: 0,
        max_value: f64::NEG_INFINITY,
        worst_point: (0.0, vec![0.0; p.d]),
        violations: 0,
        pass: true,
    };
    let visit = |t: f64, x: &[f64], report: &mut GeneratorReport| -> Result<(), LyapunovError> {
        let gen = generator_value(p, spec, t, x)?;
        let weight = spec.value(t, x)?;
        report.samples += 1;
        if gen > report.max_value {
            report.max_value = gen;
            report.worst_point = (t, x.to_vec());
        }
        if gen > 1e-7 * (1.0 + weight.abs()) {
            report.violations += 1;
            report.pass = false;
        }
        Ok(())
    };

    let mut x = vec![0.0; p.d];
    for k in 0..n_points {
        let scale = scales[k % scales.len()];
        for xi in x.iter_mut() {
            *xi = rng.next_normal() * scale;
        }
        if !p.domain.contains(&x) {
            continue;
        }
        // The tilt factor never changes the sign for elliptic form; sample
        // time only where it matters.
        let t = match spec.form {
            LyapunovForm::Elliptic => 0.0,
            LyapunovForm::SpaceTime => rng.next_range(0.0, p.horizon),
        };
        visit(t, &x, &mut report)?;
    }
    for probe in probes {
        visit(0.0, probe, &mut report)?;
    }
    Ok(report)
}

/// Result of the Monte-Carlo supermartingale test `E V(s, X_s) <= V(t, x)`.
#[derive(Debug, Clone)]
pub struct SupermartingaleReport {
    pub mean: f64,
    pub se: f64,
    pub bound: f64,
    /// Euler bias allowance `kappa * dt` added to the bound.
    pub allowance: f64,
    pub pass: bool,
    pub n_paths: usize,
}

/// Simulate `n` paths from `(t, x)` and test the sample mean of `V(s, X_s)`
/// against `V(t, x)`. The acceptance threshold carries `3 SE` of Monte-Carlo
/// slack plus an Euler-bias allowance `kappa * dt` (the inequality itself is
/// exact only for the continuous process). `kappa` defaults to `V(t, x)`.
/// Exploding paths fail the test outright.
#[allow(clippy::too_many_arguments)]
pub fn supermartingale_test(
    p: &ProblemSpec,
    spec: &LyapunovSpec,
    t: f64,
    x: &[f64],
    s: f64,
    steps: usize,
    n: usize,
    drv: &BrownianDriver,
    kappa: Option<f64>,
) -> Result<SupermartingaleReport, LyapunovError> {
    assert!(t <= s && s <= p.horizon, "need t <= s <= T");
    let bound = spec.value(t, x)?;
    let kappa = kappa.unwrap_or(bound);

    // Walk to time s only; clone the problem with a shortened horizon so the
    // uniform grid ends exactly at s.
    let mut clipped = p.clone();
    clipped.horizon = s;
    let dt = (s - t) / steps as f64;

    let spec_ref = &spec;
    let est = sde::fold_paths(
        &clipped,
        t,
        x,
        steps,
        n,
        drv,
        || (0.0f64, false),
        |acc, k, tk, xs| {
            if k == steps {
                acc.0 = spec_ref.value(tk, xs).unwrap_or(f64::NAN);
                acc.1 = true;
            }
        },
        |acc, outcome| {
            if outcome.escaped {
                return Err(SimError::Invalid(
                    "path hit the escape guard during supermartingale test".into(),
                ));
            }
            debug_assert!(acc.1);
            Ok(acc.0)
        },
    )?;
    if !est.mean.is_finite() {
        return Err(LyapunovError::NonPositive {
            t: s,
            x: x.to_vec(),
            value: f64::NAN,
        });
    }
    let allowance = kappa * dt;
    Ok(SupermartingaleReport {
        mean: est.mean,
        se: est.se,
        bound,
        allowance,
        pass: est.mean <= bound + 3.0 * est.se + allowance,
        n_paths: n,
    })
}
