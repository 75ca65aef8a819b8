//! Doubling constants and dimensions of the built-in spaces.

use hartlab::space::{BaseMeasure, ScaleRange, Space};

fn main() -> hartlab::Result<()> {
    let spaces = [
        (
            "line, Lebesgue",
            Space::grid1d(512, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?,
        ),
        (
            "half line, Bessel lambda=1",
            Space::grid1d(512, [0.0, 4.0], BaseMeasure::Bessel { lambda: 1.0 }, 1.0)?,
        ),
        (
            "plane, Lebesgue",
            Space::grid2d(576, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?,
        ),
        (
            "binary tree, depth 9",
            Space::tree(9, BaseMeasure::Lebesgue)?,
        ),
    ];
    println!(
        "{:<28} {:>6} {:>10} {:>10} {:>8} {:>8}",
        "space", "N", "resolution", "diameter", "c_mu", "n_est"
    );
    for (name, s) in &spaces {
        // stay clear of the finest scales, where the atoms dominate
        let scales = ScaleRange {
            lo: 8.0 * s.resolution(),
            hi: s.diameter() / 4.0,
            count: 8,
        };
        let d = s.estimate_doubling(&scales)?;
        println!(
            "{name:<28} {:>6} {:>10.3e} {:>10.3} {:>8.3} {:>8.3}",
            s.len(),
            s.resolution(),
            s.diameter(),
            d.c_mu,
            d.n_est
        );
    }

    let line = &spaces[0].1;
    let x = line.len() / 2;
    println!(
        "\nballs around x = {:.4} on the line:",
        line.coord(x, 0).unwrap()
    );
    for r in [0.01, 0.05, 0.1, 0.25] {
        println!("  mu(B(x, {r})) = {:.6}", line.ball_mu(x, r)?);
    }
    println!("  V(x, x+10) = {:.6}", line.volume(x, x + 10)?);
    Ok(())
}
