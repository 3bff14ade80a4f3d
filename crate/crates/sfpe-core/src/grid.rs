//! Tensor time-space grids holding discretized candidate solutions.
//!
//! A `GridFunction` stores values on uniform time knots `0 = tau_0 < ... <
//! tau_K = T` and a per-axis uniform spatial grid over a bounding box.
//! Evaluation is multilinear in space and linear in time; queries outside
//! the box clamp to the box surface, queries outside `[0, T]` clamp in time.
//! Tensor grids are kept to d <= 3; higher dimensions go through the nested
//! pointwise estimator instead.

use serde::Serialize;
use thiserror::Error;

/// Maximum spatial dimension served by tensor grids.
pub const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("tensor grids support d <= 3, got {0}")]
    Dimension(usize),
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// Shape of a solver grid: `time_steps` uniform intervals in time and
/// `knots[i]` points over `[lo[i], hi[i]]` per axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub time_steps: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub knots: Vec<usize>,
}

impl GridSpec {
    pub fn new(time_steps: usize, lo: Vec<f64>, hi: Vec<f64>, knots: Vec<usize>) -> Result<Self, GridError> {
        let d = lo.len();
        if d == 0 || d > MAX_GRID_DIM {
            return Err(GridError::Dimension(d));
        }
        if hi.len() != d || knots.len() != d {
            return Err(GridError::Invalid("lo/hi/knots length mismatch".into()));
        }
        if time_steps == 0 {
            return Err(GridError::Invalid("need at least one time interval".into()));
        }
        for i in 0..d {
            if !(lo[i] < hi[i]) {
                return Err(GridError::Invalid(format!("axis {i}: lo must be below hi")));
            }
            if knots[i] < 2 {
                return Err(GridError::Invalid(format!("axis {i}: need at least 2 knots")));
            }
        }
        Ok(GridSpec {
            time_steps,
            lo,
            hi,
            knots,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn spatial_nodes(&self) -> usize {
        self.knots.iter().product()
    }

    pub fn axis_step(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.knots[i] - 1) as f64
    }
}

/// Discretized candidate solution on a tensor grid.
///
/// Values are stored time-major, spatial nodes in C order (last axis
/// fastest): `values[k * S + j]` for time knot `k` and spatial node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub t_end: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(spec: GridSpec, t_end: f64) -> Self {
        let len = (spec.time_steps + 1) * spec.spatial_nodes();
        GridFunction {
            spec,
            t_end,
            values: vec![0.0; len],
        }
    }

    /// Build by evaluating `f(t, x)` at every node.
    pub fn from_fn(spec: GridSpec, t_end: f64, mut f: impl FnMut(f64, &[f64]) -> f64) -> Self {
        let mut out = GridFunction::zeros(spec, t_end);
        let s = out.spec.spatial_nodes();
        let mut x = vec![0.0; out.spec.dim()];
        for k in 0..=out.spec.time_steps {
            let t = out.time_knot(k);
            for j in 0..s {
                out.node_point(j, &mut x);
                out.values[k * s + j] = f(t, &x);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn time_knot(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.spec.time_steps as f64
    }

    pub fn node_value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.spec.spatial_nodes() + j]
    }

    /// Write the coordinates of spatial node `j` into `x`.
    pub fn node_point(&self, j: usize, x: &mut [f64]) {
        let d = self.spec.dim();
        let mut rem = j;
        for i in (0..d).rev() {
            let n = self.spec.knots[i];
            let idx = rem % n;
            rem /= n;
            x[i] = self.spec.lo[i] + self.spec.axis_step(i) * idx as f64;
        }
    }

    /// Interpolated evaluation; clamps to the box surface and to `[0, T]`.
    /// Evaluation exactly at a knot coordinate returns the stored value.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let kk = self.spec.time_steps;
        let dt = self.t_end / kk as f64;
        let (kt, ft) = locate(t, 0.0, dt, kk + 1);
        let lower = self.eval_space(kt, x);
        if ft == 0.0 {
            return lower;
        }
        let upper = self.eval_space(kt + 1, x);
        (1.0 - ft) * lower + ft * upper
    }

    fn eval_space(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.dim();
        let s = self.spec.spatial_nodes();
        let base = &self.values[k * s..(k + 1) * s];
        // Per-axis cell index, weight, and stride.
        let mut cells = [0usize; MAX_GRID_DIM];
        let mut fracs = [0.0f64; MAX_GRID_DIM];
        let mut strides = [0usize; MAX_GRID_DIM];
        let mut stride = 1;
        for i in (0..d).rev() {
            strides[i] = stride;
            stride *= self.spec.knots[i];
        }
        for i in 0..d {
            let (c, f) = locate(x[i], self.spec.lo[i], self.spec.axis_step(i), self.spec.knots[i]);
            cells[i] = c;
            fracs[i] = f;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..d {
                if corner & (1 << i) != 0 {
                    w *= fracs[i];
                    idx += (cells[i] + 1) * strides[i];
                } else {
                    w *= 1.0 - fracs[i];
                    idx += cells[i] * strides[i];
                }
            }
            if w != 0.0 {
                acc += w * base[idx];
            }
        }
        acc
    }

    /// Pointwise a - b on an identical grid.
    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        assert_eq!(self.spec, other.spec, "grid mismatch");
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        GridFunction {
            spec: self.spec.clone(),
            t_end: self.t_end,
            values,
        }
    }

    /// CSV serialization, one row per node: `t,x1,...,xd,u`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let s = self.spec.spatial_nodes();
        let mut out = String::with_capacity(self.values.len() * 24);
        out.push('t');
        for i in 1..=d {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",u\n");
        let mut x = vec![0.0; d];
        for k in 0..=self.spec.time_steps {
            let t = self.time_knot(k);
            for j in 0..s {
                self.node_point(j, &mut x);
                out.push_str(&format!("{t:?}"));
                for xi in &x {
                    out.push_str(&format!(",{xi:?}"));
                }
                out.push_str(&format!(",{:?}\n", self.values[k * s + j]));
            }
        }
        out
    }
}

/// Locate `q` on the uniform grid `start + i * step`, `i < n`: returns the
/// cell index in `[0, n-2]` and the fractional offset in `[0, 1]`, clamping
/// out-of-range queries. Exact knot coordinates land exactly on the knot.
fn locate(q: f64, start: f64, step: f64, n: usize) -> (usize, f64) {
    if step == 0.0 || n < 2 {
        return (0, 0.0);
    }
    let u = (q - start) / step;
    let r = u.round();
    if r >= 0.0 && (r as usize) < n && q == start + r * step {
        // Bitwise knot hit: return the stored value exactly.
        let ri = r as usize;
        return if ri == n - 1 { (n - 2, 1.0) } else { (ri, 0.0) };
    }
    if u <= 0.0 {
        return (0, 0.0);
    }
    let max_cell = n - 2;
    let c = (u.floor() as usize).min(max_cell);
    let f = (u - c as f64).clamp(0.0, 1.0);
    (c, f)
}
