//! Scalar expression DSL for problem coefficients.
//!
//! Drift components, diffusion entries, the nonlinearity, the terminal
//! condition and Lyapunov weights all arrive as strings in this small
//! closed grammar: number literals, the variables `t`, `x1..xd`, `v`,
//! the operators `+ - * / ^` with the usual precedence, parentheses,
//! and the functions `exp`, `log`, `sqrt`, `abs`, `sin`, `cos`,
//! `min`, `max`, `pow`, `norm2`.
//!
//! `norm2` is the *squared* Euclidean norm of `(x1, ..., xd)`. The name is
//! short for "norm, squared"; it is not the 2-norm itself.
//!
//! ASTs are immutable after parsing and evaluation is reentrant, so a parsed
//! expression can be shared freely across simulation workers. Evaluation
//! performs no allocation on the success path.

mod fd;
mod parse;

pub use fd::{grad_fd, hess_fd, GRAD_STEP_FACTOR, HESS_STEP_FACTOR};
pub use parse::{parse, ParseError};

use thiserror::Error;

/// Which coefficient slot an expression fills. Decides which variables are
/// legal: `g` sees only `x1..xd`; `mu`, `sigma` and `V` see `t` and `x1..xd`;
/// `f` additionally sees the solution slot `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    DriftComponent,
    DiffusionEntry,
    Nonlinearity,
    Terminal,
    Lyapunov,
}

impl Role {
    pub fn allows_t(self) -> bool {
        !matches!(self, Role::Terminal)
    }

    pub fn allows_v(self) -> bool {
        matches!(self, Role::Nonlinearity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::DriftComponent => "drift-component",
            Role::DiffusionEntry => "diffusion-entry",
            Role::Nonlinearity => "nonlinearity",
            Role::Terminal => "terminal",
            Role::Lyapunov => "lyapunov",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Time.
    T,
    /// Spatial coordinate, zero-based. `X(0)` is the source-level `x1`.
    X(usize),
    /// Solution value slot, bound only when evaluating the nonlinearity.
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Built-in functions of the closed grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Min,
    Max,
    Pow,
    /// Squared Euclidean norm of the spatial variables; nullary.
    Norm2,
}

impl Func {
    pub fn arity(self) -> usize {
        match self {
            Func::Exp | Func::Log | Func::Sqrt | Func::Abs | Func::Sin | Func::Cos => 1,
            Func::Min | Func::Max | Func::Pow => 2,
            Func::Norm2 => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
            Func::Norm2 => "norm2",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            "norm2" => Func::Norm2,
            _ => return None,
        })
    }
}

/// Parsed expression tree. Finite and acyclic by construction; function
/// nodes carry exactly as many children as their arity requires.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    Var(Var),
    Neg(Box<ExprAst>),
    Bin(BinOp, Box<ExprAst>, Box<ExprAst>),
    Call(Func, Vec<ExprAst>),
}

/// Variable bindings for one evaluation. `x` must have length `d`; `v` is
/// only read by nonlinearity ASTs and may be left unbound otherwise.
#[derive(Debug, Clone, Copy)]
pub struct EvalEnv<'a> {
    pub t: f64,
    pub x: &'a [f64],
    v: Option<f64>,
}

impl<'a> EvalEnv<'a> {
    pub fn tx(t: f64, x: &'a [f64]) -> Self {
        EvalEnv { t, x, v: None }
    }

    pub fn txv(t: f64, x: &'a [f64], v: f64) -> Self {
        EvalEnv { t, x, v: Some(v) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainErrorKind {
    LogNonpositive,
    SqrtNegative,
    DivisionByZero,
    NonFiniteResult,
    UnboundVariable,
    DimensionMismatch,
}

/// Evaluation failure, reported with the offending subexpression.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{}: in `{expr}`", kind_message(*.kind))]
pub struct EvalError {
    pub kind: DomainErrorKind,
    pub expr: String,
}

fn kind_message(kind: DomainErrorKind) -> &'static str {
    match kind {
        DomainErrorKind::LogNonpositive => "log of a non-positive value",
        DomainErrorKind::SqrtNegative => "sqrt of a negative value",
        DomainErrorKind::DivisionByZero => "division by zero",
        DomainErrorKind::NonFiniteResult => "non-finite result",
        DomainErrorKind::UnboundVariable => "unbound variable",
        DomainErrorKind::DimensionMismatch => "x index out of range for this environment",
    }
}

impl ExprAst {
    /// Evaluate under `env`. Total on finite inputs: domain violations
    /// (log/sqrt of negatives, division by zero, non-finite intermediates)
    /// come back as errors rather than silent NaNs.
    pub fn eval(&self, env: &EvalEnv) -> Result<f64, Box<EvalError>> {
        let err = |kind| Box::new(EvalError { kind, expr: self.pretty() });
        match self {
            ExprAst::Const(c) => Ok(*c),
            ExprAst::Var(Var::T) => Ok(env.t),
            ExprAst::Var(Var::X(i)) => env
                .x
                .get(*i)
                .copied()
                .ok_or_else(|| err(DomainErrorKind::DimensionMismatch)),
            ExprAst::Var(Var::V) => env.v.ok_or_else(|| err(DomainErrorKind::UnboundVariable)),
            ExprAst::Neg(a) => Ok(-a.eval(env)?),
            ExprAst::Bin(op, a, b) => {
                let a = a.eval(env)?;
                let b = b.eval(env)?;
                let out = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(err(DomainErrorKind::DivisionByZero));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                };
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(err(DomainErrorKind::NonFiniteResult))
                }
            }
            ExprAst::Call(func, args) => {
                let out = match func {
                    Func::Norm2 => env.x.iter().map(|a| a * a).sum(),
                    Func::Exp => args[0].eval(env)?.exp(),
                    Func::Log => {
                        let a = args[0].eval(env)?;
                        if a <= 0.0 {
                            return Err(err(DomainErrorKind::LogNonpositive));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        let a = args[0].eval(env)?;
                        if a < 0.0 {
                            return Err(err(DomainErrorKind::SqrtNegative));
                        }
                        a.sqrt()
                    }
                    Func::Abs => args[0].eval(env)?.abs(),
                    Func::Sin => args[0].eval(env)?.sin(),
                    Func::Cos => args[0].eval(env)?.cos(),
                    Func::Min => args[0].eval(env)?.min(args[1].eval(env)?),
                    Func::Max => args[0].eval(env)?.max(args[1].eval(env)?),
                    Func::Pow => args[0].eval(env)?.powf(args[1].eval(env)?),
                };
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(err(DomainErrorKind::NonFiniteResult))
                }
            }
        }
    }

    /// True if any node references the given variable.
    pub fn references(&self, var: Var) -> bool {
        match self {
            ExprAst::Const(_) => false,
            ExprAst::Var(w) => *w == var,
            ExprAst::Neg(a) => a.references(var),
            ExprAst::Bin(_, a, b) => a.references(var) || b.references(var),
            ExprAst::Call(f, args) => {
                // norm2 implicitly reads every spatial coordinate.
                if *f == Func::Norm2 {
                    if let Var::X(_) = var {
                        return true;
                    }
                }
                args.iter().any(|a| a.references(var))
            }
        }
    }

    pub fn references_time(&self) -> bool {
        self.references(Var::T)
    }

    /// The constant value of this AST, if it is a plain literal.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            ExprAst::Const(c) => Some(*c),
            ExprAst::Neg(a) => a.as_const().map(|c| -c),
            _ => None,
        }
    }

    /// Render back to grammar-accepted source. Reparsing the output yields a
    /// structurally identical tree.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.fmt_prec(&mut out, 0);
        out
    }

    // Precedence levels: 1 additive, 2 multiplicative, 3 unary minus, 4 power.
    fn prec(&self) -> u8 {
        match self {
            ExprAst::Const(c) if *c < 0.0 => 3,
            ExprAst::Const(_) | ExprAst::Var(_) | ExprAst::Call(..) => 5,
            ExprAst::Neg(_) => 3,
            ExprAst::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            ExprAst::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            ExprAst::Bin(BinOp::Pow, ..) => 4,
        }
    }

    fn fmt_prec(&self, out: &mut String, min_prec: u8) {
        use std::fmt::Write;
        let prec = self.prec();
        let parens = prec < min_prec;
        if parens {
            out.push('(');
        }
        match self {
            ExprAst::Const(c) => {
                if *c < 0.0 || c.fract() != 0.0 || c.abs() >= 1e17 {
                    let _ = write!(out, "{c:?}");
                } else {
                    let _ = write!(out, "{c}");
                }
            }
            ExprAst::Var(Var::T) => out.push('t'),
            ExprAst::Var(Var::V) => out.push('v'),
            ExprAst::Var(Var::X(i)) => {
                let _ = write!(out, "x{}", i + 1);
            }
            ExprAst::Neg(a) => {
                out.push('-');
                // Power binds tighter than unary minus, so -x^2 stays -(x^2).
                a.fmt_prec(out, 3);
            }
            ExprAst::Bin(op, a, b) => {
                // Left-associative ops re-parse canonically only if an
                // equal-precedence right child keeps its parentheses.
                let (sym, left_min, right_min) = match op {
                    BinOp::Add => ("+", 1, 2),
                    BinOp::Sub => ("-", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    // Power is right-associative.
                    BinOp::Pow => ("^", 5, 4),
                };
                a.fmt_prec(out, left_min);
                let _ = write!(out, " {sym} ");
                b.fmt_prec(out, right_min);
            }
            ExprAst::Call(func, args) => {
                out.push_str(func.name());
                if func.arity() > 0 {
                    out.push('(');
                    for (i, a) in args.iter().enumerate() {
                        if i > 0 {
                            out.push_str(", ");
                        }
                        a.fmt_prec(out, 0);
                    }
                    out.push(')');
                }
            }
        }
        if parens {
            out.push(')');
        }
    }
}
