//! Scenario execution: constants over several grids, corona diagnostics and
//! lemma diagnostics.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::constants::{
    constants_report, decay_ratio, goodness_flags, offsupport_ratio, operator_norm,
    weak_boundedness, ConstantsReport, LemmaRatio, PivotalMode, PoissonTable, TwoWeightParams,
};
use crate::corona::{
    build_coronas, build_stopping_cubes, projection_bound, CarlesonCheck, Corona, CoronaContext,
    CoronaMode, ProjectionBound, StoppingForest,
};
use crate::dyadic::DyadicSystem;
use crate::error::{Error, Result};
use crate::haar::HaarBasis;
use crate::harness::config::Scenario;
use crate::operators::OperatorMatrix;
use crate::rng;
use crate::space::{Measure, Space};

/// Everything built from a scenario and a seed.
pub struct Workspace {
    pub scenario: Scenario,
    pub seed: u64,
    pub space: Arc<Space>,
    pub matrix: OperatorMatrix,
    pub u: Measure,
    pub v: Measure,
    pub params: TwoWeightParams,
    pub systems: Vec<DyadicSystem>,
    pub tables: Vec<PoissonTable>,
    /// Goodness flags per grid, when the filter is on.
    pub good: Vec<Option<Vec<bool>>>,
}

impl Workspace {
    pub fn prepare(scenario: &Scenario, seed: u64) -> Result<Self> {
        Self::prepare_with(scenario, seed, seed)
    }

    /// Grids come from `seed`, weights from `weight_seed`.
    pub fn prepare_with(scenario: &Scenario, seed: u64, weight_seed: u64) -> Result<Self> {
        let space = scenario.build_space()?;
        let params = scenario.two_weight_params()?;
        let matrix = OperatorMatrix::assemble(space.clone(), scenario.kernel.clone()).map_err(
            |e| match e {
                Error::DimensionMismatch(m) => Error::Config {
                    pointer: "/kernel".into(),
                    message: m,
                },
                e => e,
            },
        )?;
        let (u, v) = scenario.build_weights(&space, weight_seed)?;
        let dp = scenario.dyadic_params();
        let grids = scenario.grids;
        let systems = (0..grids)
            .into_par_iter()
            .map(|g| {
                let s = if scenario.params.random_shift {
                    rng::derive_seed(seed, "grid", g as u64)
                } else {
                    0
                };
                DyadicSystem::build(space.clone(), dp.clone(), s)
            })
            .collect::<Result<Vec<_>>>()?;
        let tables = systems
            .par_iter()
            .map(|s| PoissonTable::build(s, params.kappa))
            .collect();
        let good = if scenario.params.goodness_filter {
            systems
                .par_iter()
                .enumerate()
                .map(|(g, s)| {
                    let other = DyadicSystem::build(
                        space.clone(),
                        dp.clone(),
                        rng::derive_seed(seed, "grid-other", g as u64),
                    )?;
                    goodness_flags(s, &other, dp.r_good, dp.eps_good).map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; grids]
        };
        Ok(Self {
            scenario: scenario.clone(),
            seed,
            space,
            matrix,
            u,
            v,
            params,
            systems,
            tables,
            good,
        })
    }

    pub fn mode(&self) -> PivotalMode {
        self.scenario.params.pivotal_mode
    }

    pub fn norm(&self) -> Result<f64> {
        operator_norm(&self.matrix, &self.u, &self.v)
    }

    /// Per-grid reports and their pooled maximum.
    pub fn constants(&self) -> Result<(Vec<ConstantsReport>, ConstantsReport)> {
        let norm = self.norm()?;
        let per_grid = (0..self.systems.len())
            .into_par_iter()
            .map(|g| {
                constants_report(
                    &self.systems[g],
                    &self.tables[g],
                    &self.matrix,
                    &self.u,
                    &self.v,
                    &self.params,
                    self.mode(),
                    self.good[g].as_deref(),
                    norm,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = ConstantsReport::pooled(&per_grid).expect("at least one grid");
        Ok((per_grid, pooled))
    }

    /// The v-side grid paired with grid `g`.
    fn partner(&self, g: usize) -> usize {
        (g + 1) % self.systems.len()
    }

    pub fn forest(&self, g: usize, pivotal: f64) -> Result<StoppingForest> {
        build_stopping_cubes(
            &self.systems[g],
            &self.tables[g],
            &self.u,
            &self.v,
            pivotal,
            self.mode(),
            self.good[g].as_deref(),
        )
    }

    pub fn corona(
        &self,
        g: usize,
        report: &ConstantsReport,
        modes: &[CoronaMode],
    ) -> Result<CoronaReport> {
        let forest = self.forest(g, report.pivotal)?;
        let sys_v = &self.systems[self.partner(g)];
        let corona = build_coronas(&forest, &self.systems[g], sys_v, self.scenario.params.r)?;
        let ctx = CoronaContext {
            system_u: &self.systems[g],
            system_v: sys_v,
            forest: &forest,
            corona: &corona,
            m: &self.matrix,
            u: &self.u,
            v: &self.v,
            testing: report.testing,
            pivotal: report.pivotal,
            params: self.params,
        };
        let checks = modes
            .par_iter()
            .map(|&m| ctx.verify(m))
            .collect::<Result<Vec<_>>>()?;
        let projection = if self.u.is_zero() {
            None
        } else {
            let basis = HaarBasis::build(&self.systems[g], &self.u)?;
            let mut r = rng::stream(self.seed, "corona-f");
            let f: Vec<f64> = (0..self.u.len())
                .map(|_| r.random_range(-1.0..1.0))
                .collect();
            Some(projection_bound(&f, &corona, &basis)?)
        };
        Ok(CoronaReport::new(g, &forest, &corona, checks, projection))
    }

    pub fn lemmas(&self, g: usize) -> LemmaReport {
        let d = &self.scenario.diagnostics;
        let mut notes = Vec::new();
        let mut keep = |name: &str, r: Result<LemmaRatio>| match r {
            Ok(x) => Some(x),
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                None
            }
        };
        let sys = &self.systems[g];
        let offsupport = keep(
            "offsupport",
            offsupport_ratio(
                sys,
                &self.tables[g],
                &self.matrix,
                &self.u,
                &self.v,
                d.samples,
                self.seed,
            ),
        );
        let decay = keep(
            "decay",
            decay_ratio(
                sys,
                &self.tables[g],
                &self.u,
                &self.params,
                d.samples,
                self.seed,
            ),
        );
        let weak = keep(
            "weak_boundedness",
            weak_boundedness(
                sys,
                &self.systems[self.partner(g)],
                &self.matrix,
                &self.u,
                &self.v,
                d.rho,
            ),
        );
        LemmaReport {
            offsupport,
            decay,
            weak_boundedness: weak,
            notes,
        }
    }

    pub fn environment(&self) -> Environment {
        Environment {
            seed: self.seed,
            n_points: self.space.len(),
            resolution: self.space.resolution(),
            diameter: self.space.diameter(),
            c_mu: self.space.c_mu(),
            n_dim: self.params.n_dim,
            grids: self.systems.len(),
            grid_seeds: (0..self.systems.len())
                .map(|g| self.systems[g].seed())
                .collect(),
            pivotal_mode: self.mode(),
            goodness_filter: self.scenario.params.goodness_filter,
            truncation: "diagonal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub seed: u64,
    pub n_points: usize,
    pub resolution: f64,
    pub diameter: f64,
    pub c_mu: f64,
    pub n_dim: f64,
    pub grids: usize,
    pub grid_seeds: Vec<u64>,
    pub pivotal_mode: PivotalMode,
    pub goodness_filter: bool,
    pub truncation: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoronaReport {
    pub grid: usize,
    pub stopping_cubes: usize,
    /// Number of stopping cubes per generation.
    pub generations: Vec<usize>,
    pub max_corona_multiplicity: usize,
    pub checks: Vec<CarlesonCheck>,
    pub projection: Option<ProjectionBound>,
}

impl CoronaReport {
    fn new(
        g: usize,
        forest: &StoppingForest,
        corona: &Corona,
        checks: Vec<CarlesonCheck>,
        projection: Option<ProjectionBound>,
    ) -> Self {
        let n = corona
            .u
            .values()
            .flatten()
            .copied()
            .max()
            .map_or(0, |m| m + 1);
        Self {
            grid: g,
            stopping_cubes: forest.len(),
            generations: forest.generations().iter().map(Vec::len).collect(),
            max_corona_multiplicity: corona.u_multiplicity(n).into_iter().max().unwrap_or(0),
            checks,
            projection,
        }
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .filter(|c| c.passed == Some(false))
            .flat_map(|c| {
                c.violations
                    .iter()
                    .map(move |v| format!("{}: {v}", c.mode.map_or("?", |m| m.as_str())))
            })
            .collect();
        if let Some(p) = self.projection.filter(|p| !p.holds()) {
            out.push(format!("projection bound: {} > {}", p.lhs, p.rhs));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LemmaReport {
    pub offsupport: Option<LemmaRatio>,
    pub decay: Option<LemmaRatio>,
    pub weak_boundedness: Option<LemmaRatio>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub constants: ConstantsReport,
    pub per_grid: Vec<ConstantsReport>,
    pub corona: Option<CoronaReport>,
    pub lemmas: Option<LemmaReport>,
    pub environment: Environment,
    /// Hard assertion failures.
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub grids: Option<usize>,
    /// Corona modes; `None` runs all of them when the scenario asks for the corona.
    pub corona_modes: Option<Vec<CoronaMode>>,
    pub timestamp: bool,
}

/// Necessity failures of one report.
pub fn necessity_failures(label: &str, r: &ConstantsReport) -> Vec<String> {
    let mut out = Vec::new();
    if !r.necessity_holds() {
        out.push(format!(
            "{label}: testing ({}, {}) exceeds the norm {}",
            r.testing, r.testing_dual, r.norm
        ));
    }
    let finite = [
        r.a2,
        r.a2_dual,
        r.testing,
        r.testing_dual,
        r.pivotal,
        r.pivotal_dual,
        r.norm,
    ]
    .iter()
    .all(|x| x.is_finite());
    if !finite {
        out.push(format!("{label}: a constant is not finite"));
    }
    out
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    let mut scenario = scenario.clone();
    if let Some(g) = opts.grids {
        scenario.grids = g;
    }
    scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let ws = Workspace::prepare(&scenario, seed)?;
    let (per_grid, pooled) = ws.constants()?;
    let mut failures = Vec::new();
    for (g, r) in per_grid.iter().enumerate() {
        failures.extend(necessity_failures(&format!("grid {g}"), r));
    }
    let mut warnings = Vec::new();
    if pooled.common_atom {
        warnings
            .push("u and v share a point mass; the hypothesis u({x}) v({x}) = 0 fails".to_string());
    }
    let modes = match &opts.corona_modes {
        Some(m) => m.clone(),
        None if scenario.diagnostics.corona => CoronaMode::ALL.to_vec(),
        None => Vec::new(),
    };
    let corona = if modes.is_empty() || ws.u.is_zero() {
        None
    } else {
        let c = ws.corona(0, &per_grid[0], &modes)?;
        failures.extend(c.failures());
        Some(c)
    };
    let lemmas = scenario.diagnostics.lemmas.then(|| ws.lemmas(0));
    let timestamp = opts.timestamp.then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    Ok(RunReport {
        name: scenario.name.clone(),
        constants: pooled,
        per_grid,
        corona,
        lemmas,
        environment: ws.environment(),
        failures,
        warnings,
        timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::WeightSpec;
    use crate::harness::report::canonical_json;

    fn two_point() -> Scenario {
        Scenario::from_json(
            r#"{
                "space": {"kind": "points", "coords": [[0.75], [0.25]], "atoms": [0.5, 0.5]},
                "kernel": {"kind": "hilbert1d"},
                "weights": {"family": "explicit", "u": [1, 4], "v": [9, 1]},
                "grids": 1,
                "params": {"random_shift": false},
                "diagnostics": {"lemmas": false}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn two_point_report() {
        let r = run_scenario(&two_point(), &RunOptions::default()).unwrap();
        assert!((r.constants.norm - 12.0).abs() < 1e-12);
        assert!((r.constants.testing - 116f64.sqrt()).abs() < 1e-12);
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn deterministic_bytes() {
        let s = Scenario::line(32, WeightSpec::Lognormal { sigma: 1.0 }, 5);
        let a = canonical_json(&run_scenario(&s, &RunOptions::default()).unwrap()).unwrap();
        let b = canonical_json(&run_scenario(&s, &RunOptions::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_kernel() {
        let mut s = Scenario::line(32, WeightSpec::Lognormal { sigma: 1.0 }, 5);
        s.kernel = crate::operators::Kernel::new(crate::operators::KernelKind::Zero, 1.0);
        let r = run_scenario(&s, &RunOptions::default()).unwrap();
        assert_eq!((r.constants.testing, r.constants.norm), (0.0, 0.0));
        assert!(r.constants.a2 > 0.0 && r.constants.pivotal > 0.0);
    }
}
