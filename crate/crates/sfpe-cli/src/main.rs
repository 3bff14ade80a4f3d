//! `sfpe`: batch driver for the stochastic fixed point solver.
//!
//! Subcommands: solve | estimate | check-lyapunov | verify-contraction |
//! couple-test | version. All inputs arrive through a config file plus a few
//! overriding flags; there is no interactive mode and no wall-clock seeding,
//! so every run is reproducible from its config and seed.
//!
//! Exit codes: 0 success (and convergence / checks passed), 1 error,
//! 2 solver hit max_iter without converging, 3 a verification check failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sfpe", version, about = "Monte-Carlo Picard solver for stochastic fixed point equations")]
struct Cli {
    /// Worker threads (fallback: env SFPE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Config file (INI-shaped, see docs/config.example.ini).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `[output] dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Picard iteration and write the solution grid + report.
    Solve(CommonArgs),
    /// Pointwise nested Monte-Carlo estimate at (t, x).
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Query time (overrides `[estimate] t`).
        #[arg(long)]
        t: Option<f64>,
        /// Query point, comma-separated (overrides `[estimate] x`).
        #[arg(long)]
        x: Option<String>,
        /// Picard depth (overrides `[estimate] depth`).
        #[arg(long)]
        depth: Option<usize>,
        /// Per-level widths `ng,nf[;ng,nf...]` (overrides `[estimate] widths`).
        #[arg(long)]
        widths: Option<String>,
    },
    /// Verify the generator inequality and the supermartingale property.
    CheckLyapunov(CommonArgs),
    /// Measure contraction ratios against the L/lambda envelope.
    VerifyContraction {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated lambda values (overrides `[contraction] lambda_sweep`).
        #[arg(long)]
        lambda_sweep: Option<String>,
    },
    /// Run the freeze-at-rest and shared-increment coupling suites.
    CoupleTest {
        #[command(flatten)]
        common: CommonArgs,
        /// Dump both path batches as CSV with this file prefix.
        #[arg(long)]
        dump_paths: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("SFPE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n > 0 {
            // Errors only if a global pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let outcome = match cli.command {
        Command::Solve(common) => commands::solve(&common),
        Command::Estimate {
            common,
            t,
            x,
            depth,
            widths,
        } => commands::estimate(&common, t, x.as_deref(), depth, widths.as_deref()),
        Command::CheckLyapunov(common) => commands::check_lyapunov(&common),
        Command::VerifyContraction {
            common,
            lambda_sweep,
        } => commands::verify_contraction(&common, lambda_sweep.as_deref()),
        Command::CoupleTest { common, dump_paths } => {
            commands::couple_test(&common, dump_paths.as_deref())
        }
        Command::Version => {
            println!("sfpe {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
