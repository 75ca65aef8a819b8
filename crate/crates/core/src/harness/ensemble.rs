//! Ensembles of weight pairs and the ratio `N / (A2 + T + V)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{Scenario, SpaceKind};
use crate::harness::run::{necessity_failures, Workspace};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub n_points: usize,
    pub a2: f64,
    pub testing: f64,
    pub pivotal: f64,
    pub norm: f64,
    pub ratio: f64,
    pub necessity: bool,
    pub common_atom: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return Self::default();
        }
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Self {
            min: v[0],
            p05: q(0.05),
            p50: q(0.5),
            p95: q(0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolutionComparison {
    pub n_points: [usize; 2],
    pub quantiles: [Quantiles; 2],
    /// `max ratio at the fine resolution / max ratio at the coarse one`.
    pub growth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub seed: u64,
    pub trials: Vec<TrialRow>,
    pub quantiles: Quantiles,
    pub all_finite: bool,
    pub necessity: bool,
    pub failures: Vec<String>,
    pub comparison: Option<ResolutionComparison>,
    pub fine_trials: Vec<TrialRow>,
}

impl EnsembleSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "trial,seed,n_points,a2,testing,pivotal,norm,ratio,necessity,common_atom\n",
        );
        for t in self.trials.iter().chain(&self.fine_trials) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                t.trial,
                t.seed,
                t.n_points,
                t.a2,
                t.testing,
                t.pivotal,
                t.norm,
                t.ratio,
                t.necessity,
                t.common_atom
            ));
        }
        s
    }
}

/// Runs `trials` independent weight draws. Trial `i` takes its weights and
/// grids from `derive_seed(seed, "trial", i)`.
pub fn run_trials(
    scenario: &Scenario,
    trials: usize,
    seed: u64,
) -> Result<(Vec<TrialRow>, Vec<String>)> {
    if trials == 0 {
        return Err(Error::param("an ensemble needs at least one trial"));
    }
    let rows = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = rng::derive_seed(seed, "trial", i as u64);
            let ws = Workspace::prepare(scenario, s)?;
            let (_, r) = ws.constants()?;
            let fails = necessity_failures(&format!("trial {i}"), &r);
            Ok((
                TrialRow {
                    trial: i,
                    seed: s,
                    n_points: ws.space.len(),
                    a2: r.a2.max(r.a2_dual),
                    testing: r.testing.max(r.testing_dual),
                    pivotal: r.pivotal.max(r.pivotal_dual),
                    norm: r.norm,
                    ratio: r.ratio,
                    necessity: r.necessity_holds(),
                    common_atom: r.common_atom,
                },
                fails,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(trials);
    let mut failures = Vec::new();
    for (row, f) in rows {
        out.push(row);
        failures.extend(f);
    }
    Ok((out, failures))
}

/// Ensemble at the scenario's resolution and, with `compare`, at twice the
/// point count with the same trial seeds.
pub fn run_ensemble(
    scenario: &Scenario,
    trials: usize,
    seed: u64,
    compare: bool,
) -> Result<EnsembleSummary> {
    let (rows, mut failures) = run_trials(scenario, trials, seed)?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let quantiles = Quantiles::of(&ratios);
    let all_finite = ratios.iter().all(|r| r.is_finite());
    if !all_finite {
        failures.push("a trial ratio is not finite".into());
    }
    let (comparison, fine_trials) = if compare {
        let fine = doubled(scenario)?;
        let (fine_rows, fine_fail) = run_trials(&fine, trials, seed)?;
        failures.extend(fine_fail);
        let fq = Quantiles::of(&fine_rows.iter().map(|r| r.ratio).collect::<Vec<_>>());
        let growth = if quantiles.max > 0.0 {
            fq.max / quantiles.max
        } else {
            0.0
        };
        let n = [rows[0].n_points, fine_rows[0].n_points];
        (
            Some(ResolutionComparison {
                n_points: n,
                quantiles: [quantiles, fq],
                growth,
            }),
            fine_rows,
        )
    } else {
        (None, Vec::new())
    };
    let necessity = rows.iter().chain(&fine_trials).all(|r| r.necessity);
    Ok(EnsembleSummary {
        seed,
        trials: rows,
        quantiles,
        all_finite,
        necessity,
        failures,
        comparison,
        fine_trials,
    })
}

/// The same scenario at twice the point count (grids) or one level deeper (trees).
pub fn doubled(scenario: &Scenario) -> Result<Scenario> {
    let mut s = scenario.clone();
    match s.space.kind {
        SpaceKind::Grid1d => s.space.n_points = s.space.n_points.map(|n| 2 * n),
        SpaceKind::Grid2d => s.space.n_points = s.space.n_points.map(|n| 4 * n),
        SpaceKind::Tree => {
            s.space.depth = Some(
                s.space
                    .depth
                    .unwrap_or_else(|| s.space.n_points.unwrap_or(1).trailing_zeros())
                    + 1,
            );
            s.space.n_points = None;
        }
        SpaceKind::Points => return Err(Error::param("explicit point sets cannot be refined")),
    }
    if s.space.atoms.is_some() {
        return Err(Error::param("custom atoms cannot be refined"));
    }
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::WeightSpec;
    use crate::harness::run::{run_scenario, RunOptions};

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of(&[3.0, 1.0, 2.0]);
        assert_eq!((q.min, q.p50, q.max), (1.0, 2.0, 3.0));
        assert!((q.p95 - 2.9).abs() < 1e-12);
    }

    #[test]
    fn single_trial_matches_scenario() {
        let s = Scenario::line(32, WeightSpec::Disjoint { sigma: 1.0 }, 0);
        let e = run_ensemble(&s, 1, 9, false).unwrap();
        let r = run_scenario(
            &s,
            &RunOptions {
                seed: Some(e.trials[0].seed),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(e.trials[0].ratio, r.constants.ratio);
        assert!(e.passed());
    }
}
