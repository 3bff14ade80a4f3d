//! Monte-Carlo Picard solver for stochastic fixed point equations.
//!
//! The library solves
//!
//! ```text
//! u(t, x) = E[ g(X_T) + integral_t^T f(s, X_s, u(s, X_s)) ds ],
//! ```
//!
//! where `X` follows an SDE `dX = mu dt + sigma dW`, by iterating the
//! Feynman-Kac map on a tensor grid in the exponentially weighted norm
//! `|v|_lambda = sup e^(lambda t) |v(t,x)| / V(t,x)` for a positive Lyapunov
//! weight `V`. It also ships verifiers for every hypothesis that machinery
//! relies on: the Lyapunov generator inequality and supermartingale property,
//! the `L/lambda` contraction rate, locality/coupling of trajectories, and
//! mean-square stability in the initial condition.
//!
//! Modules follow the pipeline:
//!
//! - [`expr`]: the coefficient expression DSL and finite differences,
//! - [`problem`]: validated problem instances and hypothesis audits,
//! - [`rng`] / [`sde`]: counter-seeded Euler-Maruyama simulation,
//! - [`lyapunov`]: weight construction and verification,
//! - [`grid`]: tensor-grid candidate solutions and weighted norms,
//! - [`solver`]: the Picard loop, contraction measurement, nested estimator,
//! - [`oracle`]: closed-form reference solutions for tests.

pub(crate) mod exec;

pub mod expr;
pub mod grid;
pub mod lyapunov;
pub mod oracle;
pub mod problem;
pub mod rng;
pub mod sde;
pub mod solver;

pub use expr::{EvalEnv, ExprAst, Role};
pub use grid::{GridFunction, GridSpec};
pub use lyapunov::{LyapunovForm, LyapunovSpec};
pub use problem::{Domain, ProblemInput, ProblemSpec, TruncationSet};
pub use rng::BrownianDriver;
pub use sde::{PathBatch, SimError};
pub use solver::{McConfig, Quadrature, SolveReport};
