//! Empirical constants of the off-support, decay and weak-boundedness
//! estimates at two resolutions.

use hartlab::constants::weak_boundedness;
use hartlab::harness::config::WeightSpec;
use hartlab::harness::{ensemble::doubled, Scenario, Workspace};

fn main() -> hartlab::Result<()> {
    let coarse = Scenario::line(256, WeightSpec::Lognormal { sigma: 0.5 }, 1);
    let fine = doubled(&coarse)?;
    for s in [&coarse, &fine] {
        let ws = Workspace::prepare(s, 1)?;
        let l = ws.lemmas(0);
        let wb = weak_boundedness(&ws.systems[0], &ws.systems[1], &ws.matrix, &ws.u, &ws.v, 1)?;
        let show = |r: Option<hartlab::constants::LemmaRatio>| {
            r.map_or("n/a".to_string(), |r| {
                format!("{:.4} ({} samples)", r.constant, r.samples)
            })
        };
        println!("N = {}", ws.space.len());
        println!("  off-support       {}", show(l.offsupport));
        println!("  decay             {}", show(l.decay));
        println!(
            "  weak boundedness  {:.4} ({} pairs)",
            wb.constant, wb.samples
        );
        for n in &l.notes {
            println!("  note: {n}");
        }
    }
    Ok(())
}
