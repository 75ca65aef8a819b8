//! Ratio N / (A2 + T + V) over disjoint log-normal weight pairs, at two
//! resolutions.

use hartlab::harness::config::WeightSpec;
use hartlab::harness::{run_ensemble, Scenario};

fn main() -> hartlab::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|t| t.parse().ok())
        .unwrap_or(20);
    let mut s = Scenario::line(256, WeightSpec::Disjoint { sigma: 1.0 }, 0);
    s.grids = 1;
    let e = run_ensemble(&s, trials, 2024, true)?;
    let c = e.comparison.as_ref().expect("comparison requested");
    for (n, q) in c.n_points.iter().zip(&c.quantiles) {
        println!(
            "N = {n}: ratio min {:.4}  p05 {:.4}  median {:.4}  p95 {:.4}  max {:.4}",
            q.min, q.p05, q.p50, q.p95, q.max
        );
    }
    println!("growth of the max under doubling: {:.3}", c.growth);
    println!("testing <= norm on every trial: {}", e.necessity);
    Ok(())
}
