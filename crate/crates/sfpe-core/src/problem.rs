//! Problem assembly: coefficients, domain, and hypothesis audits.

use thiserror::Error;

use crate::expr::{self, EvalEnv, EvalError, ExprAst, Role, Var};
use crate::rng::SubRng;

/// Spatial domain of the state process. Membership is decidable in closed
/// form for both kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    FullSpace,
    AxisBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl Domain {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::FullSpace => true,
            Domain::AxisBox { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(&xi, (&l, &h))| xi >= l && xi <= h),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Domain::FullSpace => None,
            Domain::AxisBox { lo, .. } => Some(lo.len()),
        }
    }
}

/// Compact exhaustion member `O_r`: points with norm at most `r` whose
/// 1/r-ball stays inside the parent domain.
#[derive(Debug, Clone)]
pub struct TruncationSet {
    pub r: f64,
    pub parent: Domain,
}

impl TruncationSet {
    pub fn new(r: f64, parent: Domain) -> Self {
        assert!(r > 0.0, "truncation radius must be positive");
        TruncationSet { r, parent }
    }

    /// Exact evaluation of the two-condition definition. For a full-space
    /// parent the ball condition is vacuous. For an axis box the Euclidean
    /// 1/r-ball fits iff every face is at least 1/r away.
    pub fn membership(&self, x: &[f64]) -> bool {
        let norm2: f64 = x.iter().map(|a| a * a).sum();
        if norm2.sqrt() > self.r {
            return false;
        }
        match &self.parent {
            Domain::FullSpace => true,
            Domain::AxisBox { lo, hi } => {
                let eps = 1.0 / self.r;
                x.iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .all(|(&xi, (&l, &h))| xi - eps >= l && xi + eps <= h)
            }
        }
    }
}

/// One fully validated problem instance: the tuple
/// `(d, m, T, mu, sigma, f, g, L, domain)`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub d: usize,
    pub m: usize,
    pub horizon: f64,
    /// `d` drift components `mu_i(t, x)`.
    pub drift: Vec<ExprAst>,
    /// `d * m` diffusion entries `sigma_ij(t, x)`, row-major.
    pub diffusion: Vec<ExprAst>,
    /// Nonlinearity `f(t, x, v)`.
    pub nonlinearity: ExprAst,
    /// Terminal condition `g(x)`.
    pub terminal: ExprAst,
    /// Declared Lipschitz constant of `f` in `v`.
    pub lipschitz: f64,
    pub domain: Domain,
    /// True if drift or diffusion reference `t`.
    pub time_dependent: bool,
    /// Filled when every drift/diffusion entry is a literal constant;
    /// unlocks closed-form stepping in the simulator.
    pub const_coeffs: Option<ConstCoeffs>,
    /// Analytic coercivity constant `c` with
    /// `max(<x, mu>, |sigma|_F^2) <= c (1 + |x|^2)`, known for builtin
    /// families.
    pub growth_constant: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConstCoeffs {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ProblemSpec {
    pub fn f_references_v(&self) -> bool {
        self.nonlinearity.references(Var::V)
    }

    pub fn f_is_zero(&self) -> bool {
        self.nonlinearity.as_const() == Some(0.0)
    }

    pub fn sigma_entry(&self, i: usize, j: usize) -> &ExprAst {
        &self.diffusion[i * self.m + j]
    }

    /// Evaluate drift into `out` (length `d`).
    pub fn eval_drift(
        &self,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), Box<EvalError>> {
        let env = EvalEnv::tx(t, x);
        for (o, e) in out.iter_mut().zip(self.drift.iter()) {
            *o = e.eval(&env)?;
        }
        Ok(())
    }

    /// Evaluate diffusion into `out` (length `d * m`, row-major).
    pub fn eval_diffusion(
        &self,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), Box<EvalError>> {
        let env = EvalEnv::tx(t, x);
        for (o, e) in out.iter_mut().zip(self.diffusion.iter()) {
            *o = e.eval(&env)?;
        }
        Ok(())
    }
}

/// Raw problem description, as it arrives from a config file or a test.
#[derive(Debug, Clone, Default)]
pub struct ProblemInput {
    /// Builtin family name, if any. Mutually exclusive with expressions.
    pub family: Option<String>,
    /// Family parameters (theta, scale, ...), keyed by name.
    pub params: Vec<(String, f64)>,
    pub d: usize,
    pub m: usize,
    pub horizon: f64,
    pub drift: Vec<String>,
    pub diffusion: Vec<String>,
    pub nonlinearity: Option<String>,
    pub terminal: Option<String>,
    pub lipschitz: Option<f64>,
    pub domain: Option<Domain>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("{role} expression `{text}`: {source}")]
    Parse {
        role: &'static str,
        text: String,
        source: expr::ParseError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing field: {0}")]
    Missing(&'static str),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("unknown builtin family `{0}`")]
    UnknownFamily(String),
}

fn parse_role(
    text: &str,
    role: Role,
    d: usize,
    role_name: &'static str,
) -> Result<ExprAst, BuildError> {
    expr::parse(text, role, d).map_err(|source| BuildError::Parse {
        role: role_name,
        text: text.to_owned(),
        source,
    })
}

/// Assemble and validate a `ProblemSpec` from expressions or a builtin
/// family. Builtin families expand to expressions internally so everything
/// downstream sees one representation.
pub fn build(input: &ProblemInput) -> Result<ProblemSpec, BuildError> {
    let mut input = input.clone();
    let mut growth_constant = None;
    if let Some(family) = input.family.clone() {
        growth_constant = expand_family(&family, &mut input)?;
    }

    let d = input.d;
    let m = input.m;
    if d == 0 {
        return Err(BuildError::Invalid("d must be at least 1".into()));
    }
    if m == 0 {
        return Err(BuildError::Invalid("m must be at least 1".into()));
    }
    if !(input.horizon > 0.0) {
        return Err(BuildError::Invalid("T must be positive".into()));
    }
    let lipschitz = input.lipschitz.ok_or(BuildError::Missing("L"))?;
    if !(lipschitz > 0.0) {
        return Err(BuildError::Invalid("L must be positive".into()));
    }

    if input.drift.len() != d {
        return Err(BuildError::Dimension(format!(
            "expected {d} drift components, got {}",
            input.drift.len()
        )));
    }
    if input.diffusion.len() != d * m {
        return Err(BuildError::Dimension(format!(
            "expected {} diffusion entries (d*m), got {}",
            d * m,
            input.diffusion.len()
        )));
    }

    let drift = input
        .drift
        .iter()
        .map(|s| parse_role(s, Role::DriftComponent, d, "drift"))
        .collect::<Result<Vec<_>, _>>()?;
    let diffusion = input
        .diffusion
        .iter()
        .map(|s| parse_role(s, Role::DiffusionEntry, d, "diffusion"))
        .collect::<Result<Vec<_>, _>>()?;
    let nonlinearity = parse_role(
        input.nonlinearity.as_deref().ok_or(BuildError::Missing("f"))?,
        Role::Nonlinearity,
        d,
        "nonlinearity",
    )?;
    let terminal = parse_role(
        input.terminal.as_deref().ok_or(BuildError::Missing("g"))?,
        Role::Terminal,
        d,
        "terminal",
    )?;

    let domain = input.domain.clone().unwrap_or(Domain::FullSpace);
    if let Domain::AxisBox { lo, hi } = &domain {
        if lo.len() != d || hi.len() != d {
            return Err(BuildError::Dimension(
                "domain box bounds must have length d".into(),
            ));
        }
        if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
            return Err(BuildError::Invalid(
                "axis-box domain needs lo < hi per coordinate".into(),
            ));
        }
    }

    let time_dependent = drift.iter().chain(diffusion.iter()).any(|e| e.references_time());
    let const_coeffs = {
        let mu: Option<Vec<f64>> = drift.iter().map(|e| e.as_const()).collect();
        let sigma: Option<Vec<f64>> = diffusion.iter().map(|e| e.as_const()).collect();
        match (mu, sigma) {
            (Some(mu), Some(sigma)) => Some(ConstCoeffs { mu, sigma }),
            _ => None,
        }
    };

    Ok(ProblemSpec {
        d,
        m,
        horizon: input.horizon,
        drift,
        diffusion,
        nonlinearity,
        terminal,
        lipschitz,
        domain,
        time_dependent,
        const_coeffs,
        growth_constant,
    })
}

fn param(input: &ProblemInput, name: &str, default: f64) -> f64 {
    input
        .params
        .iter()
        .rev()
        .find(|(k, _)| k == name)
        .map(|(_, v)| *v)
        .unwrap_or(default)
}

/// Expand a builtin family into expression strings. Returns the family's
/// analytic coercivity constant where one exists.
fn expand_family(family: &str, input: &mut ProblemInput) -> Result<Option<f64>, BuildError> {
    let d = input.d.max(1);
    input.d = d;
    if input.m == 0 {
        input.m = d;
    }
    let m = input.m;
    let identity_sigma = |scale: f64| -> Vec<String> {
        let mut out = Vec::with_capacity(d * m);
        for i in 0..d {
            for j in 0..m {
                out.push(if i == j { format!("{scale:?}") } else { "0".into() });
            }
        }
        out
    };
    let c = match family {
        // dX = scale dW
        "brownian" => {
            let scale = param(input, "scale", 1.0);
            input.drift = vec!["0".into(); d];
            input.diffusion = identity_sigma(scale);
            Some((scale * scale * m as f64).max(f64::MIN_POSITIVE))
        }
        // dX = -theta X dt + s dW
        "ou" => {
            let theta = param(input, "theta", 1.0);
            let s = param(input, "s", 1.0);
            if theta < 0.0 {
                return Err(BuildError::Invalid("ou family needs theta >= 0".into()));
            }
            input.drift = (1..=d).map(|i| format!("-{theta:?}*x{i}")).collect();
            input.diffusion = identity_sigma(s);
            Some((s * s * m as f64).max(f64::MIN_POSITIVE))
        }
        // dX_i = a X_i dt + b X_i dW_i
        "gbm" => {
            let a = param(input, "a", 0.05);
            let b = param(input, "b", 0.2);
            input.drift = (1..=d).map(|i| format!("{a:?}*x{i}")).collect();
            let mut sigma = Vec::with_capacity(d * m);
            for i in 0..d {
                for j in 0..m {
                    sigma.push(if i == j {
                        format!("{b:?}*x{}", i + 1)
                    } else {
                        "0".into()
                    });
                }
            }
            input.diffusion = sigma;
            Some(a.max(b * b).max(f64::MIN_POSITIVE))
        }
        // dX_i = (X_i - X_i^3) dt + s dW_i
        "double-well" => {
            let s = param(input, "s", 1.0);
            input.drift = (1..=d).map(|i| format!("x{i} - x{i}^3")).collect();
            input.diffusion = identity_sigma(s);
            Some(1.0f64.max(s * s * m as f64))
        }
        other => return Err(BuildError::UnknownFamily(other.to_owned())),
    };
    Ok(c)
}

/// Result of sampling the Lipschitz-in-`v` hypothesis of the nonlinearity.
#[derive(Debug, Clone)]
pub struct LipschitzAudit {
    pub declared: f64,
    pub max_ratio: f64,
    /// Sample achieving the max ratio: (t, x, v, w).
    pub worst: (f64, Vec<f64>, f64, f64),
    pub violation: bool,
}

/// Sample `(t, x, v, w)` tuples and compare the observed difference quotient
/// of `f` in `v` with the declared constant. `L` is declared and audited, not
/// inferred. Flags a violation beyond 1e-9 relative slack.
pub fn audit_lipschitz(
    p: &ProblemSpec,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzAudit, Box<EvalError>> {
    assert!(n_samples >= 1);
    let mut rng = SubRng::from_key(&[seed, 0x11b5_4c41]);
    let scales = [1.0, 4.0, 16.0];
    let mut max_ratio = 0.0f64;
    let mut worst = (0.0, vec![0.0; p.d], 0.0, 0.0);
    let mut x = vec![0.0; p.d];
    for k in 0..n_samples {
        let scale = scales[k % scales.len()];
        let t = rng.next_range(0.0, p.horizon);
        for xi in x.iter_mut() {
            *xi = rng.next_normal() * scale;
        }
        if !p.domain.contains(&x) {
            continue;
        }
        let v = rng.next_normal() * scale;
        let w = rng.next_normal() * scale;
        if v == w {
            continue;
        }
        let fv = p.nonlinearity.eval(&EvalEnv::txv(t, &x, v))?;
        let fw = p.nonlinearity.eval(&EvalEnv::txv(t, &x, w))?;
        let ratio = (fv - fw).abs() / (v - w).abs();
        if ratio > max_ratio {
            max_ratio = ratio;
            worst = (t, x.clone(), v, w);
        }
    }
    Ok(LipschitzAudit {
        declared: p.lipschitz,
        max_ratio,
        worst,
        violation: max_ratio > p.lipschitz * (1.0 + 1e-9),
    })
}

/// Sampled estimate of `max(<x, mu(t,x)>, |sigma(t,x)|_F^2) / (1 + |x|^2)`,
/// the coercivity ratio that gates the polynomial Lyapunov family.
pub fn coercivity_estimate(
    p: &ProblemSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64, Box<EvalError>> {
    let mut rng = SubRng::from_key(&[seed, 0xc0e2_c1f7]);
    let scales = [1.0, 4.0, 16.0];
    let mut x = vec![0.0; p.d];
    let mut mu = vec![0.0; p.d];
    let mut sigma = vec![0.0; p.d * p.m];
    let mut max_ratio = f64::MIN_POSITIVE;
    for k in 0..n_samples {
        let scale = scales[k % scales.len()];
        let t = rng.next_range(0.0, p.horizon);
        for xi in x.iter_mut() {
            *xi = rng.next_normal() * scale;
        }
        if !p.domain.contains(&x) {
            continue;
        }
        p.eval_drift(t, &x, &mut mu)?;
        p.eval_diffusion(t, &x, &mut sigma)?;
        let norm2: f64 = x.iter().map(|a| a * a).sum();
        let inner: f64 = x.iter().zip(mu.iter()).map(|(a, b)| a * b).sum();
        let frob2: f64 = sigma.iter().map(|a| a * a).sum();
        let ratio = inner.max(frob2) / (1.0 + norm2);
        max_ratio = max_ratio.max(ratio);
    }
    Ok(max_ratio)
}
