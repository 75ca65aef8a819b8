//! Constants and coronas against independent brute-force evaluations.

use std::sync::Arc;

use rand::Rng;

use hartlab::constants::TwoWeightParams;
use hartlab::constants::{
    a2_constant, enumerate_subpartitions, operator_norm, pivotal_constant, power_iteration_norm,
    weak_boundedness, PivotalMode, PoissonTable,
};
use hartlab::corona::{
    build_coronas, build_stopping_cubes, corona_project, projection_bound, CoronaContext,
    CoronaMode, StoppingForest,
};
use hartlab::dyadic::{DyadicParams, DyadicSystem};
use hartlab::haar::HaarBasis;
use hartlab::operators::{Kernel, KernelKind, OperatorMatrix};
use hartlab::rng;
use hartlab::space::{BaseMeasure, Measure, Space};

fn line(n: usize) -> Arc<Space> {
    Arc::new(Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap())
}

fn lognormal(n: usize, sigma: f64, seed: u64, name: &str) -> Measure {
    let mut r = rng::stream(seed, name);
    Measure::new(
        (0..n)
            .map(|_| (sigma * (r.random::<f64>() - 0.5) * 3.4).exp() / n as f64)
            .collect(),
    )
    .unwrap()
}

/// `K(Q, w)` from coordinates alone: distance to the interval of member
/// coordinates and a ball count around the anchor.
fn k_by_hand(space: &Space, sys: &DyadicSystem, q: usize, w: &[f64]) -> f64 {
    let xs: Vec<f64> = (0..space.len())
        .map(|i| space.coord(i, 0).unwrap())
        .collect();
    let cube = &sys.cubes()[q];
    let l = cube.side;
    let anchor = match cube.anchor {
        hartlab::space::Center::Coord(c) => c,
        hartlab::space::Center::Point(p) => xs[p],
    };
    let mut total = 0.0;
    for (y, &wy) in w.iter().enumerate() {
        let d = cube
            .members
            .iter()
            .map(|&m| (xs[m] - xs[y]).abs())
            .fold(f64::INFINITY, f64::min);
        let rho = l + d;
        let ball: f64 = (0..xs.len())
            .filter(|&z| (xs[z] - anchor).abs() < rho)
            .map(|z| space.mu().atoms()[z])
            .sum();
        total += (l / rho) * wy / ball;
    }
    total
}

#[test]
fn a2_symmetric_for_equal_weights_and_matches_double_loop() {
    let space = line(256);
    let sys = DyadicSystem::build(space.clone(), DyadicParams::shifted1d(), 21).unwrap();
    let table = PoissonTable::build(&sys, 1.0);
    let mu = space.mu().clone();
    let a2 = a2_constant(&sys, &table, &mu, &mu, 1.0);
    assert!((a2.forward - a2.dual).abs() <= 1e-15 * a2.forward);
    let mut best = 0.0f64;
    for q in 0..sys.len() {
        let c = &sys.cubes()[q];
        let uq: f64 = c.members.iter().map(|&x| mu.atoms()[x]).sum();
        best = best.max((uq * k_by_hand(&space, &sys, q, mu.atoms()) / c.side).sqrt());
    }
    assert!(
        (a2.forward - best).abs() <= 1e-12 * best,
        "{} vs {best}",
        a2.forward
    );
}

#[test]
fn a2_single_cube_by_substitution() {
    let space = line(4);
    let sys = DyadicSystem::build(
        space.clone(),
        DyadicParams::shifted1d().with_levels(0, 0),
        0,
    )
    .unwrap();
    let table = PoissonTable::build(&sys, 1.0);
    let u = Measure::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = Measure::new(vec![0.5, 0.5, 1.0, 2.0]).unwrap();
    // one cube [0,1) of side 1 holding every point; all distances vanish,
    // so K(Q, v) = v(X) / mu(B(anchor, 1)) = 4 / 1
    assert_eq!(sys.len(), 1);
    let a2 = a2_constant(&sys, &table, &u, &v, 1.0);
    assert!((a2.forward - (10.0f64 * 4.0).sqrt()).abs() < 1e-12);
    assert!((a2.dual - (4.0f64 * 10.0).sqrt()).abs() < 1e-12);
}

#[test]
fn pivotal_single_cube_and_zero_v() {
    let space = line(4);
    let sys = DyadicSystem::build(
        space.clone(),
        DyadicParams::shifted1d().with_levels(0, 0),
        0,
    )
    .unwrap();
    let table = PoissonTable::build(&sys, 1.0);
    let u = Measure::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = Measure::new(vec![0.5, 0.5, 1.0, 2.0]).unwrap();
    let p = pivotal_constant(&sys, &table, &u, &v, PivotalMode::IncludeSelf, None).unwrap();
    let k = 10.0; // K(Q, 1_Q u) = u(X) / mu(B) = 10
    assert!((p.forward - (4.0 * k * k / 10.0f64).sqrt()).abs() < 1e-12);
    let z = pivotal_constant(
        &sys,
        &table,
        &u,
        &Measure::zeros(4),
        PivotalMode::IncludeSelf,
        None,
    )
    .unwrap();
    assert_eq!((z.forward, z.dual), (0.0, 0.0));
}

#[test]
fn pivotal_with_spike_matches_exhaustive_search() {
    let space = line(8);
    let sys = DyadicSystem::build(
        space.clone(),
        DyadicParams::shifted1d().with_levels(0, 2),
        0,
    )
    .unwrap();
    let table = PoissonTable::build(&sys, 1.0);
    let u = space.mu().clone();
    let mut atoms = vec![0.0; 8];
    atoms[5] = 3.0;
    let v = Measure::new(atoms).unwrap();
    let p = pivotal_constant(&sys, &table, &u, &v, PivotalMode::IncludeSelf, None).unwrap();
    let mut best = 0.0f64;
    for q in 0..sys.len() {
        let e = &sys.cubes()[q].members;
        let uq = u.mass(e);
        let psi = enumerate_subpartitions(&sys, q)
            .iter()
            .map(|part| {
                part.iter()
                    .map(|&s| {
                        let k = table.k_on(s, u.atoms(), e);
                        v.mass(&sys.cubes()[s].members) * k * k
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        best = best.max((psi / uq).sqrt());
    }
    assert!((p.forward - best).abs() <= 1e-12 * best);
}

#[test]
fn power_iteration_agrees_with_svd() {
    let space = line(64);
    let m = OperatorMatrix::assemble(space, Kernel::hilbert()).unwrap();
    let u = lognormal(64, 1.0, 1, "u");
    let v = lognormal(64, 1.0, 1, "v");
    let svd = operator_norm(&m, &u, &v).unwrap();
    let p = power_iteration_norm(&m, &u, &v, 1e-14, 100_000, 5).unwrap();
    assert!((p.norm - svd).abs() <= 1e-8 * svd, "{} vs {svd}", p.norm);
    assert!(p.lower <= svd * (1.0 + 1e-12) && svd <= p.upper * (1.0 + 1e-12));
}

#[test]
fn weak_boundedness_zero_cases() {
    let space = line(32);
    let sys = DyadicSystem::build(space.clone(), DyadicParams::shifted1d(), 3).unwrap();
    let zero = OperatorMatrix::assemble(space.clone(), Kernel::new(KernelKind::Zero, 1.0)).unwrap();
    let u = lognormal(32, 1.0, 2, "u");
    let v = lognormal(32, 1.0, 2, "v");
    assert_eq!(
        weak_boundedness(&sys, &sys, &zero, &u, &v, 1)
            .unwrap()
            .constant,
        0.0
    );
}

/// `q` lies in the corona of `s` when `s` is a minimal stopping cube
/// containing a child of `q` (or `q` itself for a leaf).
fn corona_oracle(sys: &DyadicSystem, forest: &StoppingForest, s: usize, q: usize) -> bool {
    let stops = forest.members();
    let minimal = |c: usize| {
        stops
            .iter()
            .copied()
            .filter(|&t| sys.contains(t, c))
            .min_by(|&a, &b| sys.cubes()[a].side.total_cmp(&sys.cubes()[b].side))
    };
    let children = &sys.cubes()[q].children;
    if children.is_empty() {
        minimal(q) == Some(s)
    } else {
        children.iter().any(|&c| minimal(c) == Some(s))
    }
}

fn forest_with_generations(
    n: usize,
) -> (
    Arc<Space>,
    DyadicSystem,
    DyadicSystem,
    PoissonTable,
    Measure,
    Measure,
    StoppingForest,
    f64,
) {
    let space = line(n);
    for seed in 0..200u64 {
        let sys = DyadicSystem::build(space.clone(), DyadicParams::shifted1d(), seed).unwrap();
        let other =
            DyadicSystem::build(space.clone(), DyadicParams::shifted1d(), seed + 1000).unwrap();
        let table = PoissonTable::build(&sys, 1.0);
        let u = lognormal(n, 2.0, seed, "u");
        let v = lognormal(n, 2.0, seed, "v");
        let p = pivotal_constant(&sys, &table, &u, &v, PivotalMode::IncludeSelf, None)
            .unwrap()
            .forward;
        let forest =
            build_stopping_cubes(&sys, &table, &u, &v, p, PivotalMode::IncludeSelf, None).unwrap();
        if forest.generations().len() >= 2 {
            return (space, sys, other, table, u, v, forest, p);
        }
    }
    panic!("no seed produced two generations");
}

#[test]
fn corona_membership_matches_minimal_containing_oracle() {
    let (_, sys, other, _, _, _, forest, _) = forest_with_generations(64);
    let corona = build_coronas(&forest, &sys, &other, 2).unwrap();
    for s in forest.members() {
        for &root in forest.roots() {
            for q in sys.descendants(root) {
                let listed = corona.u_corona(s).unwrap().contains(&q);
                assert_eq!(
                    listed,
                    corona_oracle(&sys, &forest, s, q),
                    "cube {q} in corona of {s}"
                );
            }
        }
    }
}

#[test]
fn corona_projection_norms_two_ways() {
    let (space, sys, other, _, u, _, forest, _) = forest_with_generations(64);
    let corona = build_coronas(&forest, &sys, &other, 2).unwrap();
    let basis = HaarBasis::build(&sys, &u).unwrap();
    let mut r = rng::stream(8, "f");
    let f: Vec<f64> = (0..space.len())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let direct: f64 = forest
        .members()
        .iter()
        .map(|&s| {
            basis
                .norm(&corona_project(&f, s, &corona, &basis).unwrap())
                .powi(2)
        })
        .sum();
    let pb = projection_bound(&f, &corona, &basis).unwrap();
    assert!((direct - pb.lhs).abs() <= 1e-10 * pb.lhs.max(1.0));
    assert!(pb.holds());
}

#[test]
fn corona_constants_vanish_with_zero_v() {
    let (space, sys, other, _, u, _, forest, p) = forest_with_generations(64);
    let corona = build_coronas(&forest, &sys, &other, 2).unwrap();
    let m = OperatorMatrix::assemble(space, Kernel::hilbert()).unwrap();
    let v = Measure::zeros(64);
    let ctx = CoronaContext {
        system_u: &sys,
        system_v: &other,
        forest: &forest,
        corona: &corona,
        m: &m,
        u: &u,
        v: &v,
        testing: 1.0,
        pivotal: p,
        params: TwoWeightParams::default(),
    };
    for mode in [
        CoronaMode::Paraproduct,
        CoronaMode::Alpha,
        CoronaMode::Beta,
        CoronaMode::Gamma,
    ] {
        assert_eq!(ctx.verify(mode).unwrap().constant, 0.0, "{mode}");
    }
}

#[test]
fn alpha_bounded_over_t_on_six_levels() {
    let (space, sys, other, _, u, v, forest, p) = forest_with_generations(64);
    let corona = build_coronas(&forest, &sys, &other, 2).unwrap();
    let m = OperatorMatrix::assemble(space, Kernel::hilbert()).unwrap();
    let ctx = CoronaContext {
        system_u: &sys,
        system_v: &other,
        forest: &forest,
        corona: &corona,
        m: &m,
        u: &u,
        v: &v,
        testing: 1.0,
        pivotal: p,
        params: TwoWeightParams::default(),
    };
    let a = ctx.verify(CoronaMode::Alpha).unwrap();
    assert_eq!(a.per_t.len(), 3);
    assert!(a.per_t.iter().all(|x| x.1.is_finite()) && a.constant.is_finite());
}
