//! Random dyadic systems in both construction modes, their measured
//! constants, and goodness with respect to an independent grid.

use std::sync::Arc;

use hartlab::dyadic::{DyadicParams, DyadicSystem};
use hartlab::space::{BaseMeasure, Space};

fn describe(label: &str, sys: &DyadicSystem) {
    let v = sys.validate();
    println!(
        "{label:<22} cubes {:>5}  levels {}..{}  max children {}  c1 {:.4}  C1 {:.4}  valid {}",
        sys.len(),
        sys.k_min(),
        sys.k_max(),
        sys.max_children(),
        v.c1,
        v.big_c1,
        v.passed()
    );
}

fn main() -> hartlab::Result<()> {
    let line = Arc::new(Space::grid1d(256, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?);
    let standard = DyadicSystem::build(line.clone(), DyadicParams::shifted1d(), 0)?;
    let shifted = DyadicSystem::build(line.clone(), DyadicParams::shifted1d(), 42)?;
    describe("line, seed 0", &standard);
    describe("line, seed 42", &shifted);

    let plane = Arc::new(Space::grid2d(256, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?);
    describe(
        "plane, generic 1/2",
        &DyadicSystem::build(plane.clone(), DyadicParams::generic(0.5).relaxed(), 7)?,
    );
    describe(
        "plane, generic 1/12",
        &DyadicSystem::build(plane, DyadicParams::generic(1.0 / 12.0), 7)?,
    );
    let tree = Arc::new(Space::tree(8, BaseMeasure::Lebesgue)?);
    describe(
        "tree, generic 1/2",
        &DyadicSystem::build(tree, DyadicParams::generic(0.5).relaxed(), 3)?,
    );

    // level-4 cubes of the shifted grid: where they sit and whether they are good
    println!("\nlevel 4 of the seed-42 grid against the standard grid (r = 2, eps = 0.2):");
    for &q in shifted.level(4) {
        let c = &shifted.cubes()[q];
        let lo = line.coord(c.members[0], 0).unwrap();
        let hi = line.coord(*c.members.last().unwrap(), 0).unwrap();
        let good = shifted.is_good(q, &standard, 2, 0.2)?;
        println!(
            "  [{lo:.4}, {hi:.4}]  {:>3} points  {}",
            c.members.len(),
            if good { "good" } else { "bad" }
        );
    }
    Ok(())
}
