//! Probability that a point falls in the boundary layer of a random cube,
//! against the continuum value 2 tau.

use std::sync::Arc;

use hartlab::dyadic::{surgery_curve, DyadicParams};
use hartlab::space::{BaseMeasure, Space};

fn main() -> hartlab::Result<()> {
    let space = Arc::new(Space::grid1d(
        16_384,
        [0.0, 1.0],
        BaseMeasure::Lebesgue,
        1.0,
    )?);
    let taus: Vec<f64> = (1..=10).map(|i| 0.02 * i as f64).collect();
    let rows = surgery_curve(
        &space,
        &DyadicParams::shifted1d(),
        space.len() / 2,
        1,
        &taus,
        20_000,
        1,
    )?;
    println!("{:>6} {:>9} {:>9} {:>7}", "tau", "estimate", "2 tau", "z");
    for r in rows {
        println!(
            "{:>6.2} {:>9.4} {:>9.4} {:>7.2}",
            r.tau,
            r.estimate,
            2.0 * r.tau,
            (r.estimate - 2.0 * r.tau) / r.stderr
        );
    }
    Ok(())
}
