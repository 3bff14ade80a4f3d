//! Flat-sectioned key/value config files (INI-shaped), hand-editable and
//! versioned through a `schema_version` key.
//!
//! ```ini
//! schema_version = 1
//!
//! [problem]
//! family = brownian
//! d = 1
//! T = 1.0
//! L = 1.0
//! f = v
//! g = norm2
//!
//! [lyapunov]
//! kind = polynomial
//! p = 2.0
//! c = 1.0
//!
//! [solver]
//! time_steps = 10
//! grid_lo = -4
//! grid_hi = 4
//! grid_knots = 41
//! paths = 20000
//! steps = 50
//! seed = 42
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use sfpe_core::expr::{parse as parse_expr, Role};
use sfpe_core::grid::GridSpec;
use sfpe_core::lyapunov::LyapunovSpec;
use sfpe_core::problem::{Domain, ProblemInput};
use sfpe_core::solver::{McConfig, Quadrature};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    BadValue {
        section: String,
        key: String,
        message: String,
    },
    #[error("missing required key `{key}` in section [{section}]")]
    Missing { section: String, key: String },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: i64 },
}

/// Raw parsed file: `(section, key) -> value`, last occurrence wins except
/// for list-like keys which callers fetch with `values()`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), String>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw_line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ConfigError::Malformed {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            entries.insert(
                (section.clone(), key.trim().to_string()),
                value.trim().to_string(),
            );
        }
        let cfg = RawConfig { entries };
        let found = cfg.get_i64("", "schema_version")?.ok_or(ConfigError::Missing {
            section: "(top level)".into(),
            key: "schema_version".into(),
        })?;
        if found != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion { found });
        }
        Ok(cfg)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.get(section, key).ok_or_else(|| ConfigError::Missing {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    fn bad(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get(section, key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| self.bad(section, key, format!("`{v}` is not a number")))
            })
            .transpose()
    }

    pub fn get_i64(&self, section: &str, key: &str) -> Result<Option<i64>, ConfigError> {
        self.get(section, key)
            .map(|v| {
                v.parse::<i64>()
                    .map_err(|_| self.bad(section, key, format!("`{v}` is not an integer")))
            })
            .transpose()
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        Ok(self.get_i64(section, key)?.map(|v| v.max(0) as usize))
    }

    /// Comma-separated list of reals.
    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|piece| {
                        piece.trim().parse::<f64>().map_err(|_| {
                            self.bad(section, key, format!("`{piece}` is not a number"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

/// Assemble the problem description from a `[problem]`-shaped section.
pub fn problem_input(cfg: &RawConfig, section: &str) -> Result<ProblemInput, ConfigError> {
    let d = cfg.get_usize(section, "d")?.unwrap_or(1);
    let m = cfg.get_usize(section, "m")?.unwrap_or(d);
    let horizon = cfg.get_f64(section, "T")?.unwrap_or(1.0);
    let family = cfg.get(section, "family").map(str::to_string);

    let mut params = Vec::new();
    for key in ["theta", "s", "scale", "a", "b"] {
        if let Some(v) = cfg.get_f64(section, key)? {
            params.push((key.to_string(), v));
        }
    }

    let mut drift = Vec::new();
    let mut diffusion = Vec::new();
    if family.is_none() {
        for i in 1..=d {
            drift.push(cfg.require(section, &format!("drift_{i}"))?.to_string());
        }
        for i in 1..=d {
            for j in 1..=m {
                diffusion.push(cfg.require(section, &format!("sigma_{i}_{j}"))?.to_string());
            }
        }
    }

    let domain = match cfg.get(section, "domain") {
        None | Some("full") => None,
        Some("box") => {
            let lo = cfg
                .get_f64_list(section, "box_lo")?
                .ok_or_else(|| ConfigError::Missing {
                    section: section.into(),
                    key: "box_lo".into(),
                })?;
            let hi = cfg
                .get_f64_list(section, "box_hi")?
                .ok_or_else(|| ConfigError::Missing {
                    section: section.into(),
                    key: "box_hi".into(),
                })?;
            Some(Domain::AxisBox { lo, hi })
        }
        Some(other) => {
            return Err(cfg.bad(section, "domain", format!("unknown domain kind `{other}`")))
        }
    };

    Ok(ProblemInput {
        family,
        params,
        d,
        m,
        horizon,
        drift,
        diffusion,
        nonlinearity: cfg.get(section, "f").map(str::to_string),
        terminal: cfg.get(section, "g").map(str::to_string),
        lipschitz: cfg.get_f64(section, "L")?,
        domain,
    })
}

/// Assemble the Lyapunov weight from the `[lyapunov]` section.
pub fn lyapunov_spec(cfg: &RawConfig, d: usize) -> Result<LyapunovSpec, ConfigError> {
    let section = "lyapunov";
    match cfg.get(section, "kind").unwrap_or("polynomial") {
        "polynomial" => {
            let p = cfg.get_f64(section, "p")?.unwrap_or(2.0);
            let c = cfg.get_f64(section, "c")?.unwrap_or(1.0);
            if p <= 0.0 || c <= 0.0 {
                return Err(cfg.bad(section, "p", "polynomial weight needs p > 0 and c > 0"));
            }
            Ok(LyapunovSpec::polynomial(p, c, d))
        }
        "expression" => {
            let text = cfg.require(section, "v")?;
            let expr = parse_expr(text, Role::Lyapunov, d)
                .map_err(|e| cfg.bad(section, "v", e.to_string()))?;
            match cfg.get(section, "form").unwrap_or("elliptic") {
                "elliptic" => {
                    let rho = cfg.get_f64(section, "rho")?.unwrap_or(0.0);
                    Ok(LyapunovSpec::elliptic(expr, rho))
                }
                "spacetime" => Ok(LyapunovSpec::space_time(expr)),
                other => Err(cfg.bad(section, "form", format!("unknown form `{other}`"))),
            }
        }
        other => Err(cfg.bad(section, "kind", format!("unknown kind `{other}`"))),
    }
}

/// Grid shape from the `[solver]` section.
pub fn grid_spec(cfg: &RawConfig, d: usize) -> Result<GridSpec, ConfigError> {
    let section = "solver";
    let time_steps = cfg.get_usize(section, "time_steps")?.unwrap_or(10);
    let broadcast = |key: &str, default: f64| -> Result<Vec<f64>, ConfigError> {
        Ok(match cfg.get_f64_list(section, key)? {
            Some(list) if list.len() == d => list,
            Some(list) if list.len() == 1 => vec![list[0]; d],
            Some(list) => {
                return Err(cfg.bad(
                    section,
                    key,
                    format!("expected 1 or {d} entries, got {}", list.len()),
                ))
            }
            None => vec![default; d],
        })
    };
    let lo = broadcast("grid_lo", -4.0)?;
    let hi = broadcast("grid_hi", 4.0)?;
    let knots = match cfg.get_usize(section, "grid_knots")? {
        Some(n) => vec![n; d],
        None => vec![41; d],
    };
    GridSpec::new(time_steps, lo, hi, knots)
        .map_err(|e| cfg.bad(section, "grid_knots", e.to_string()))
}

/// Monte-Carlo budget from the `[solver]` section. The seed is mandatory:
/// there is no wall-clock fallback, every run must be reproducible.
pub fn mc_config(cfg: &RawConfig, seed_override: Option<u64>) -> Result<McConfig, ConfigError> {
    let section = "solver";
    let seed = match seed_override {
        Some(s) => s,
        None => cfg
            .get_i64(section, "seed")?
            .ok_or_else(|| ConfigError::Missing {
                section: section.into(),
                key: "seed".into(),
            })? as u64,
    };
    let quadrature = match cfg.get(section, "quadrature").unwrap_or("left") {
        "left" => Quadrature::Left,
        "trapezoid" => Quadrature::Trapezoid,
        other => {
            return Err(cfg.bad(
                section,
                "quadrature",
                format!("unknown quadrature `{other}` (use left | trapezoid)"),
            ))
        }
    };
    Ok(McConfig {
        n_paths: cfg.get_usize(section, "paths")?.unwrap_or(10_000),
        steps: cfg.get_usize(section, "steps")?.unwrap_or(50),
        seed,
        quadrature,
    })
}
