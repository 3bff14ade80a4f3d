//! End-to-end tests of the `sfpe` binary: exit-code contract, file outputs,
//! and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU64, Ordering};

static CASE: AtomicU64 = AtomicU64::new(0);

fn work_dir() -> PathBuf {
    let id = CASE.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "sfpe-cli-test-{}-{id}",
        std::process::id()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.ini");
    std::fs::write(&path, body).unwrap();
    path
}

fn sfpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfpe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const HEAT_CONFIG: &str = "
schema_version = 1

[problem]
family = brownian
d = 1
m = 1
T = 1.0
L = 1.0
f = 0
g = norm2

[lyapunov]
kind = polynomial
p = 2.0
c = 1.0

[solver]
time_steps = 4
grid_lo = -2
grid_hi = 2
grid_knots = 9
paths = 2000
steps = 5
tol = 1e-3
max_iter = 5
seed = 41
";

const LINEAR_F_CONFIG: &str = "
schema_version = 1

[problem]
family = brownian
d = 1
m = 1
T = 1.0
L = 1.0
f = v
g = norm2

[lyapunov]
kind = polynomial
p = 2.0
c = 1.0

[solver]
time_steps = 5
grid_lo = -3
grid_hi = 3
grid_knots = 13
paths = 1000
steps = 10
lambda = 2.0
tol = 1e-3
max_iter = 25
seed = 17
";

#[test]
fn version_runs() {
    let out = sfpe(&["version"]);
    assert_eq!(exit_code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("sfpe"));
}

#[test]
fn solve_heat_converges_in_one_iteration() {
    let dir = work_dir();
    let cfg = write_config(&dir, HEAT_CONFIG);
    let out_dir = dir.join("out");
    let out = sfpe(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("solve_report.json")).unwrap();
    assert!(report.contains("\"converged\": true"));
    // f is independent of v: one effective iteration.
    assert_eq!(report.matches("\"delta\"").count(), 1);
    let csv = std::fs::read_to_string(out_dir.join("solution.csv")).unwrap();
    assert!(csv.starts_with("t,x1,u\n"));
    assert_eq!(csv.lines().count(), 1 + 5 * 9);
}

#[test]
fn solve_linear_f_converges_geometrically() {
    let dir = work_dir();
    let cfg = write_config(&dir, LINEAR_F_CONFIG);
    let out_dir = dir.join("out");
    let out = sfpe(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("solve_report.json")).unwrap();
    assert!(report.contains("\"converged\": true"));
    // Contraction factor is at most 1/2 at lambda = 2L, so iteration count
    // stays within ceil(log2(delta_1 / tol)) + 1 of the first delta.
    let iters = report.matches("\"delta\"").count();
    assert!(iters <= 20, "took {iters} iterations");
}

#[test]
fn solve_is_reproducible_modulo_timestamp() {
    let dir = work_dir();
    let cfg = write_config(&dir, HEAT_CONFIG);
    let (out_a, out_b) = (dir.join("a"), dir.join("b"));
    for out_dir in [&out_a, &out_b] {
        let out = sfpe(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0);
    }
    let csv_a = std::fs::read(out_a.join("solution.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("solution.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "solution CSV must be byte-identical");

    let strip = |path: &Path| -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("unix_timestamp"))
            .map(str::to_owned)
            .collect()
    };
    assert_eq!(
        strip(&out_a.join("solve_report.json")),
        strip(&out_b.join("solve_report.json")),
        "report JSON must match apart from the timestamp line"
    );
}

#[test]
fn solve_is_thread_count_invariant() {
    let dir = work_dir();
    let cfg = write_config(&dir, LINEAR_F_CONFIG);
    let (out_a, out_b) = (dir.join("t1"), dir.join("t4"));
    for (out_dir, threads) in [(&out_a, "1"), (&out_b, "4")] {
        let out = sfpe(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(exit_code(&out), 0);
    }
    let csv_a = std::fs::read(out_a.join("solution.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("solution.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "CSV must not depend on the worker count");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = work_dir();
    let cfg = write_config(&dir, HEAT_CONFIG);
    let (out_a, out_b) = (dir.join("s1"), dir.join("s2"));
    for (out_dir, seed) in [(&out_a, "100"), (&out_b, "200")] {
        let out = sfpe(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(exit_code(&out), 0);
    }
    let csv_a = std::fs::read(out_a.join("solution.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("solution.csv")).unwrap();
    assert_ne!(csv_a, csv_b, "different seeds must change the estimates");
}

#[test]
fn malformed_config_names_the_offender() {
    let dir = work_dir();
    let cfg = write_config(&dir, "schema_version = 1\n[solver]\nbroken line here\n");
    let out = sfpe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "stderr: {err}");
}

#[test]
fn missing_seed_is_an_error() {
    let dir = work_dir();
    let cfg = write_config(
        &dir,
        "schema_version = 1\n[problem]\nfamily = brownian\nd = 1\nT = 1\nL = 1\nf = 0\ng = norm2\n[solver]\npaths = 10\n",
    );
    let out = sfpe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn estimate_depth_zero_prints_zero() {
    let dir = work_dir();
    let cfg = write_config(&dir, HEAT_CONFIG);
    let out = sfpe(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--depth",
        "0",
        "--x",
        "0",
    ]);
    assert_eq!(exit_code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"estimate\":0.0"), "stdout: {stdout}");
}

#[test]
fn estimate_deterministic_truncated_series() {
    let dir = work_dir();
    let cfg = write_config(
        &dir,
        "
schema_version = 1

[problem]
d = 1
m = 1
T = 1.0
L = 1.0
drift_1 = 0
sigma_1_1 = 0
f = v
g = 1

[solver]
seed = 3

[estimate]
steps = 4
max_work = 1000000
",
    );
    let out = sfpe(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--t",
        "0",
        "--x",
        "0",
        "--depth",
        "4",
        "--widths",
        "1,1",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let est = value["estimate"].as_f64().unwrap();
    assert!((est - 65.0 / 24.0).abs() < 1e-12, "estimate {est}");
}

#[test]
fn estimate_work_cap_exits_with_error() {
    let dir = work_dir();
    let cfg = write_config(
        &dir,
        "
schema_version = 1

[problem]
family = brownian
d = 1
T = 1.0
L = 1.0
f = v
g = norm2

[solver]
seed = 3

[estimate]
steps = 10
max_work = 50
",
    );
    let out = sfpe(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--depth",
        "3",
        "--widths",
        "10,10",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("work cap"));
}

const CHECK_CONFIG_GOOD: &str = "
schema_version = 1

[problem]
family = brownian
d = 1
m = 1
T = 1.0
L = 1.0
f = 0
g = norm2

[lyapunov]
kind = polynomial
p = 2.0
c = 1.0

[solver]
seed = 5

[check]
points = 2000
sm_paths = 4000
sm_steps = 50
";

#[test]
fn check_lyapunov_passes_polynomial_family() {
    let dir = work_dir();
    let cfg = write_config(&dir, CHECK_CONFIG_GOOD);
    let out = sfpe(&["check-lyapunov", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stdout: {}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn check_lyapunov_fails_without_decay() {
    // Same spatial weight but rho = 0: E[1 + X_s^2] grows, the test fails.
    let dir = work_dir();
    let cfg = write_config(
        &dir,
        &CHECK_CONFIG_GOOD.replace(
            "kind = polynomial\np = 2.0\nc = 1.0",
            "kind = expression\nv = 1 + norm2\nform = elliptic\nrho = 0.0",
        ),
    );
    let out = sfpe(&["check-lyapunov", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3, "stdout: {}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn check_lyapunov_nonpositive_weight_is_an_error() {
    let dir = work_dir();
    let cfg = write_config(
        &dir,
        &CHECK_CONFIG_GOOD.replace(
            "kind = polynomial\np = 2.0\nc = 1.0",
            "kind = expression\nv = x1\nform = elliptic\nrho = 1.0",
        ),
    );
    let out = sfpe(&["check-lyapunov", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not positive"));
}

#[test]
fn verify_contraction_emits_csv_rows() {
    let dir = work_dir();
    let cfg = write_config(&dir, LINEAR_F_CONFIG);
    let out_dir = dir.join("out");
    let out = sfpe(&[
        "verify-contraction",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--lambda-sweep",
        "2,20",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("contraction.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda,measured,bound"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    // lambda = 2L: measured below 1/2 plus Monte-Carlo slack.
    assert!(rows[0][1] <= 0.55, "measured {} at lambda 2", rows[0][1]);
    assert_eq!(rows[0][2], 0.5);
    // lambda = 20L: an order smaller.
    assert!(rows[1][1] <= 0.06, "measured {} at lambda 20", rows[1][1]);
    assert_eq!(rows[1][2], 0.05);
}

#[test]
fn verify_contraction_zero_for_v_free_f() {
    let dir = work_dir();
    let cfg = write_config(&dir, &LINEAR_F_CONFIG.replace("f = v", "f = x1"));
    let out_dir = dir.join("out");
    let out = sfpe(&[
        "verify-contraction",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--lambda-sweep",
        "2",
    ]);
    assert_eq!(exit_code(&out), 0);
    let csv = std::fs::read_to_string(out_dir.join("contraction.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let measured: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(measured, 0.0);
}

fn couple_config(drift2: &str) -> String {
    format!(
        "
schema_version = 1

[problem]
d = 1
m = 1
T = 1.0
L = 1.0
drift_1 = -x1
sigma_1_1 = 1
f = 0
g = norm2

[problem2]
d = 1
m = 1
T = 1.0
L = 1.0
drift_1 = {drift2}
sigma_1_1 = 1
f = 0
g = norm2

[solver]
seed = 11

[couple]
x0 = 0
steps = 400
paths = 200
region_radius = 2.0
"
    )
}

#[test]
fn couple_test_identical_problems_exact() {
    let dir = work_dir();
    let cfg = write_config(&dir, &couple_config("-x1"));
    let out = sfpe(&["couple-test", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stdout: {}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn couple_test_local_agreement_exact() {
    // Drifts agree on the ball of radius 2, differ outside.
    let dir = work_dir();
    let cfg = write_config(&dir, &couple_config("-x1 + 10*max(0, norm2 - 4)"));
    let out = sfpe(&["couple-test", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stdout: {}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn couple_test_detects_divergence_at_origin() {
    let dir = work_dir();
    let cfg = write_config(&dir, &couple_config("-x1 + 1"));
    let out = sfpe(&["couple-test", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("first divergence"), "stdout: {stdout}");
}

#[test]
fn couple_test_dumps_batches() {
    let dir = work_dir();
    let cfg = write_config(&dir, &couple_config("-x1"));
    let prefix = dir.join("paths");
    let out = sfpe(&[
        "couple-test",
        "--config",
        cfg.to_str().unwrap(),
        "--dump-paths",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let a = std::fs::read_to_string(dir.join("paths.a.csv")).unwrap();
    assert!(a.starts_with("path,step,t,x1\n"));
    assert_eq!(a.lines().count(), 1 + 200 * 401);
}
