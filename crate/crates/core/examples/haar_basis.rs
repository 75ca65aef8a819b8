//! Weighted Haar basis: expansion, reconstruction and the good/bad split.

use std::sync::Arc;

use rand::Rng;

use hartlab::dyadic::{DyadicParams, DyadicSystem};
use hartlab::haar::HaarBasis;
use hartlab::rng;
use hartlab::space::{BaseMeasure, Measure, Space};

fn main() -> hartlab::Result<()> {
    let n = 128;
    let space = Arc::new(Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?);
    let sys = DyadicSystem::build(space.clone(), DyadicParams::shifted1d(), 5)?;
    let mut r = rng::stream(5, "example");
    let w = Measure::new(
        (0..n)
            .map(|_| r.random_range(0.2..2.0) / n as f64)
            .collect(),
    )?;
    let basis = HaarBasis::build(&sys, &w)?;
    let f: Vec<f64> = (0..n)
        .map(|i| (i as f64 / 9.0).sin() + r.random_range(-0.1..0.1))
        .collect();

    let norm2 = basis.norm(&f).powi(2);
    println!("||f||^2 = {norm2:.12}");
    println!("Parseval sum = {:.12}", basis.parseval_sum(&f)?);

    let mut rec = basis.expectation_level(&f, sys.k_min())?;
    for k in sys.k_min()..sys.k_max() {
        let d = basis.martingale_difference(&f, k)?;
        rec.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        let err: Vec<f64> = f.iter().zip(&rec).map(|(a, b)| a - b).collect();
        println!(
            "  through level {:>2}: residual {:.3e}",
            k + 1,
            basis.norm(&err)
        );
    }

    let ns = basis.norm_scaling();
    println!(
        "norm-scaling constant {:.3}, L1 x Linf constant {:.3}",
        ns.constant, ns.l1_linf_constant
    );

    let other = DyadicSystem::build(space, DyadicParams::shifted1d(), 6)?;
    for rr in [2, 4, 6] {
        let split = basis.split_good_bad(&f, &other, rr, 0.2)?;
        println!(
            "r = {rr}: {:>3} bad cubes, ||f_bad||^2 / ||f||^2 = {:.4}",
            split.bad_cubes.len(),
            basis.norm(&split.f_bad).powi(2) / norm2
        );
    }
    Ok(())
}
