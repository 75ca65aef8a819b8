//! Weighted operator norm of the discretized Hilbert transform, by dense SVD
//! and by power iteration, plus the kernel's measured size and smoothness.

use std::sync::Arc;

use hartlab::constants::{operator_norm, power_iteration_norm};
use hartlab::operators::{Kernel, OperatorMatrix};
use hartlab::space::{BaseMeasure, Space};

fn main() -> hartlab::Result<()> {
    for n in [64, 128, 256, 512] {
        let space = Arc::new(Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0)?);
        let m = OperatorMatrix::assemble(space.clone(), Kernel::hilbert())?;
        let mu = space.mu();
        let svd = operator_norm(&m, mu, mu)?;
        let p = power_iteration_norm(&m, mu, mu, 1e-12, 10_000, 1)?;
        let k = m.validate(20_000, 1);
        println!(
            "N = {n:>3}: SVD {svd:.10}  power {:.10} ({} steps)  size {:.3}  smoothness {:.3}",
            p.norm, p.iterations, k.size_constant, k.smoothness_constant
        );
    }
    println!(
        "(the continuum Hilbert transform has norm pi = {:.10})",
        std::f64::consts::PI
    );
    Ok(())
}
