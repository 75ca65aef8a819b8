use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hartlab::corona::CoronaMode;
use hartlab::dyadic::{surgery_curve, Mode};
use hartlab::harness::report::{canonical_json, constants_csv, surgery_csv, write_or_print};
use hartlab::harness::verify::{run_suite, Module};
use hartlab::harness::{run_ensemble, run_scenario, RunOptions, Scenario, Workspace};
use hartlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hartlab",
    version,
    about = "Two-weight constants on finite spaces of homogeneous type"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the scenario's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// A2, testing, pivotal constants and the operator norm over random grids.
    Constants {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grids: Option<usize>,
        /// Emit CSV (one row per grid plus a pooled row) instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Record the wall-clock time in the report.
        #[arg(long)]
        timestamp: bool,
    },
    /// Invariant suites by module.
    Verify {
        /// space, dyadic, haar, operators, constants, corona or all.
        #[arg(default_value = "all")]
        module: String,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo boundary-layer probabilities over random grids.
    Surgery {
        #[command(flatten)]
        common: Common,
        /// `start:stop:count`.
        #[arg(long, default_value = "0.02:0.2:10")]
        tau_grid: String,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        /// Grid level of the cubes.
        #[arg(long, default_value_t = 1)]
        level: i32,
        /// Point index; the middle point when absent.
        #[arg(long)]
        point: Option<usize>,
    },
    /// Stopping cubes, coronas and Carleson estimates.
    Corona {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "stopping_mass,paraproduct,alpha,beta,gamma")]
        modes: String,
    },
    /// Ratio N / (A2 + T + V) over random weight pairs.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Repeat at twice the resolution and compare.
        #[arg(long)]
        compare_resolution: bool,
        #[arg(long)]
        csv: bool,
    },
}

fn parse_tau_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config {
        pointer: "--tau-grid".into(),
        message: format!("expected start:stop:count, got `{s}`"),
    };
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(bad());
    };
    let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    let n: usize = n.parse().map_err(|_| bad())?;
    match n {
        0 => Err(bad()),
        1 => Ok(vec![a]),
        // rounded so that 0.02:0.2:10 prints as 0.04, not 0.04000000000000001
        _ => Ok((0..n)
            .map(|i| ((a + (b - a) * i as f64 / (n - 1) as f64) * 1e12).round() / 1e12)
            .collect()),
    }
}

fn load(c: &Common) -> Result<(Scenario, u64)> {
    let s = Scenario::from_path(&c.config)?;
    let seed = c.seed.unwrap_or(s.seed);
    Ok((s, seed))
}

/// `Ok(true)` when every hard assertion passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Constants {
            common,
            grids,
            csv,
            timestamp,
        } => {
            let (s, seed) = load(&common)?;
            let mut s = s;
            s.diagnostics.corona = false;
            let opts = RunOptions {
                seed: Some(seed),
                grids,
                corona_modes: None,
                timestamp,
            };
            let report = run_scenario(&s, &opts)?;
            let text = if csv {
                constants_csv(&report.per_grid, &report.constants)
            } else {
                canonical_json(&report)?
            };
            write_or_print(common.out.as_deref(), &text)?;
            for f in &report.failures {
                eprintln!("FAIL {f}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(report.passed())
        }
        Command::Verify { module, common } => {
            let (s, seed) = load(&common)?;
            let modules: Vec<Module> = if module == "all" {
                Module::ALL.to_vec()
            } else {
                module
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<_>>()?
            };
            let ws = Workspace::prepare(&s, seed)?;
            let mut ok = true;
            let mut text = String::new();
            for m in modules {
                let r = run_suite(&ws, m)?;
                ok &= r.passed();
                text.push_str(&r.to_string());
            }
            write_or_print(common.out.as_deref(), &text)?;
            Ok(ok)
        }
        Command::Surgery {
            common,
            tau_grid,
            trials,
            level,
            point,
        } => {
            let (s, seed) = load(&common)?;
            let taus = parse_tau_grid(&tau_grid)?;
            let space = s.build_space()?;
            let params = s.dyadic_params();
            let x = point.unwrap_or(space.len() / 2);
            let rows = surgery_curve(&space, &params, x, level, &taus, trials, seed)?;
            let shifted = params.mode == Mode::Shifted1d;
            let text = surgery_csv(&rows, |t| shifted.then_some(2.0 * t));
            write_or_print(common.out.as_deref(), &text)?;
            Ok(true)
        }
        Command::Corona { common, modes } => {
            let (s, seed) = load(&common)?;
            let modes = modes
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<Vec<CoronaMode>>>()?;
            let mut s = s;
            s.diagnostics.lemmas = false;
            let opts = RunOptions {
                seed: Some(seed),
                corona_modes: Some(modes),
                ..Default::default()
            };
            let report = run_scenario(&s, &opts)?;
            let corona = report.corona.as_ref().ok_or_else(|| Error::Config {
                pointer: "/weights".into(),
                message: "u vanishes; no stopping cubes".into(),
            })?;
            write_or_print(common.out.as_deref(), &canonical_json(corona)?)?;
            for f in &report.failures {
                eprintln!("FAIL {f}");
            }
            Ok(report.passed())
        }
        Command::Ensemble {
            common,
            trials,
            compare_resolution,
            csv,
        } => {
            let (s, seed) = load(&common)?;
            let summary = run_ensemble(&s, trials, seed, compare_resolution)?;
            let text = if csv {
                summary.csv()
            } else {
                canonical_json(&summary)?
            };
            write_or_print(common.out.as_deref(), &text)?;
            for f in &summary.failures {
                eprintln!("FAIL {f}");
            }
            Ok(summary.passed())
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. }
            | Error::Json(_)
            | Error::Io(_)
            | Error::UnknownMode(_)
            | Error::InvalidParameter(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
