//! Stopping cubes and coronas for a log-normal pair, with the Carleson checks.

use hartlab::corona::CoronaMode;
use hartlab::harness::config::WeightSpec;
use hartlab::harness::{Scenario, Workspace};

fn main() -> hartlab::Result<()> {
    let s = Scenario::line(256, WeightSpec::Lognormal { sigma: 2.0 }, 4);
    let ws = Workspace::prepare(&s, 4)?;
    let (per_grid, _) = ws.constants()?;
    let report = ws.corona(0, &per_grid[0], &CoronaMode::ALL)?;
    println!("stopping cubes: {}", report.stopping_cubes);
    println!("cubes per generation: {:?}", report.generations);
    println!(
        "largest number of coronas holding one cube: {}",
        report.max_corona_multiplicity
    );
    for c in &report.checks {
        let mode = c.mode.map(|m| m.to_string()).unwrap_or_default();
        let verdict = match c.passed {
            Some(true) => "holds",
            Some(false) => "VIOLATED",
            None => "measured",
        };
        println!("{mode:<14} constant {:>10.4}  {verdict}", c.constant);
        if !c.generation_mass.is_empty() {
            println!(
                "{:<14} generation mass fractions {:.4?}",
                "", c.generation_mass
            );
        }
    }
    if let Some(p) = &report.projection {
        println!("projection bound: {:.6} <= {:.6}", p.lhs, p.rhs);
    }
    Ok(())
}
