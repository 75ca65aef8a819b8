//! A2, testing and pivotal constants against the operator norm for a
//! scenario file (default: a disjoint log-normal pair on the line).

use hartlab::harness::report::constants_csv;
use hartlab::harness::{run_scenario, RunOptions, Scenario};

fn main() -> hartlab::Result<()> {
    let scenario = match std::env::args().nth(1) {
        Some(path) => Scenario::from_path(path.as_ref())?,
        None => Scenario::line(
            256,
            hartlab::harness::config::WeightSpec::Disjoint { sigma: 1.0 },
            11,
        ),
    };
    let mut s = scenario;
    s.diagnostics.corona = false;
    s.diagnostics.lemmas = false;
    let report = run_scenario(&s, &RunOptions::default())?;
    print!("{}", constants_csv(&report.per_grid, &report.constants));
    let c = &report.constants;
    println!("\nN / (A2 + T + V) = {:.4}", c.ratio);
    println!(
        "testing <= norm in both directions: {}",
        c.necessity_holds()
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
