//! Invariant suites by module, printed as pass/fail tables.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::constants::{classical_poisson_1d, poisson_k, ConstantsReport};
use crate::corona::CoronaMode;
use crate::dyadic::DyadicSystem;
use crate::error::{Error, Result};
use crate::haar::HaarBasis;
use crate::harness::config::{BaseKind, SpaceKind};
use crate::harness::run::Workspace;
use crate::rng;
use crate::space::{Measure, ScaleRange, Space};

const TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        passed: bool,
        value: f64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            detail: detail.into(),
        }
    }

    /// Passes when `value <= bound`.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, value, format!("<= {bound:e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub module: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        writeln!(f, "[{}]", self.module)?;
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "  {tag}  {:<width$}  {:>12.4e}  {}",
                c.name, c.value, c.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Space,
    Dyadic,
    Haar,
    Operators,
    Constants,
    Corona,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::Space,
        Module::Dyadic,
        Module::Haar,
        Module::Operators,
        Module::Constants,
        Module::Corona,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Module::Space => "space",
            Module::Dyadic => "dyadic",
            Module::Haar => "haar",
            Module::Operators => "operators",
            Module::Constants => "constants",
            Module::Corona => "corona",
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

pub fn run_suite(ws: &Workspace, module: Module) -> Result<SuiteReport> {
    let checks = match module {
        Module::Space => space_checks(&ws.space, ws.seed),
        Module::Dyadic => ws
            .systems
            .iter()
            .enumerate()
            .flat_map(|(g, s)| dyadic_checks(s, &format!("grid {g}")))
            .collect(),
        Module::Haar => {
            let w = if ws.u.is_zero() {
                ws.space.mu().clone()
            } else {
                ws.u.clone()
            };
            let mut out = Vec::new();
            for (g, s) in ws.systems.iter().enumerate() {
                out.extend(haar_checks(
                    s,
                    &w,
                    rng::derive_seed(ws.seed, "haar", g as u64),
                    &format!("grid {g}"),
                )?);
                out.extend(norm_scaling_checks(s, &format!("grid {g}"))?);
            }
            out
        }
        Module::Operators => operator_checks(ws)?,
        Module::Constants => constants_checks(ws)?,
        Module::Corona => corona_checks(ws)?,
    };
    Ok(SuiteReport {
        module: module.as_str().to_string(),
        checks,
    })
}

pub fn space_checks(space: &Space, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let q = space.validate_quasi_triangle(20_000, seed);
    out.push(Check::new(
        "quasi-triangle",
        q.passed(),
        q.max_ratio,
        format!("A0 = {}", space.a0()),
    ));
    out.push(Check::new(
        "c_mu finite",
        space.c_mu().is_finite() && space.c_mu() >= 1.0,
        space.c_mu(),
        "",
    ));
    let res = space.resolution();
    let diam = space.diameter();
    if diam > 8.0 * res {
        let scales = ScaleRange {
            lo: 2.0 * res,
            hi: diam / 4.0,
            count: 8,
        };
        match space.estimate_doubling(&scales) {
            Ok(d) => out.push(Check::new(
                "doubling estimate",
                d.c_mu.is_finite(),
                d.c_mu,
                format!("n = {:.3}", d.n_est),
            )),
            Err(e) => out.push(Check::new(
                "doubling estimate",
                false,
                f64::NAN,
                e.to_string(),
            )),
        }
    }
    // ball measures grow with the radius
    let mut r = rng::stream(seed, "balls");
    let mut monotone = true;
    for _ in 0..32.min(space.len()) {
        let x = r.random_range(0..space.len());
        for k in 0..16 {
            let rad = diam * 2f64.powi(-k) * 1.01;
            let m = space.ball_mu(x, rad).unwrap_or(f64::NAN);
            let smaller = space.ball_mu(x, rad / 2.0).unwrap_or(f64::NAN);
            monotone &= smaller <= m;
        }
    }
    out.push(Check::new("balls monotone in r", monotone, 0.0, ""));
    out
}

pub fn dyadic_checks(sys: &DyadicSystem, label: &str) -> Vec<Check> {
    let v = sys.validate();
    let item = |name: &str, ok: bool| Check::new(format!("{label}: {name}"), ok, 0.0, "");
    let mut out = vec![
        item("partition", v.partition),
        item("nested", v.nested),
        item("ball containment", v.containment),
        item("outer balls monotone", v.outer_monotone),
        item("net separation", v.separated),
        item("net covering", v.covering),
    ];
    out.push(Check::new(
        format!("{label}: c1 > 0"),
        v.c1 > 0.0,
        v.c1,
        format!("C1 = {:.4}", v.big_c1),
    ));
    out
}

/// Orthonormality, cancellation, Parseval, reconstruction, the tagged
/// identity and norm scaling for the `w`-adapted basis on `sys`.
pub fn haar_checks(sys: &DyadicSystem, w: &Measure, seed: u64, label: &str) -> Result<Vec<Check>> {
    let basis = HaarBasis::build(sys, w)?;
    let n = w.len();
    let mut r = rng::stream(seed, "f");
    let f: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let fnorm2 = basis.inner(&f, &f);
    let mut out = Vec::new();

    // orthonormality within and across cubes: Gram matrix of all functions
    let funcs: Vec<Vec<f64>> = (0..sys.len())
        .flat_map(|q| basis.functions(q).iter().map(|h| basis.to_points(h)))
        .collect();
    let mut ortho = 0.0f64;
    let mut cancel = 0.0f64;
    for (i, a) in funcs.iter().enumerate() {
        cancel = cancel.max(
            a.iter()
                .zip(w.atoms())
                .map(|(x, m)| x * m)
                .sum::<f64>()
                .abs(),
        );
        for (j, b) in funcs.iter().enumerate().skip(i) {
            let target = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((basis.inner(a, b) - target).abs());
        }
    }
    out.push(Check::at_most(
        format!("{label}: orthonormality"),
        ortho,
        TOL,
    ));
    out.push(Check::at_most(
        format!("{label}: cancellation"),
        cancel,
        TOL,
    ));

    let pars = basis.parseval_sum(&f)?;
    out.push(Check::at_most(
        format!("{label}: Parseval"),
        (pars - fnorm2).abs() / fnorm2.max(f64::MIN_POSITIVE),
        TOL,
    ));

    // E_{k_min} f + sum_k D_k f = f on every root window
    let mut rec = basis.expectation_level(&f, sys.k_min())?;
    for k in sys.k_min()..sys.k_max() {
        let d = basis.martingale_difference(&f, k)?;
        rec.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    // null cubes carry nothing in L^2(w)
    let diff: Vec<f64> = f.iter().zip(&rec).map(|(a, b)| a - b).collect();
    out.push(Check::at_most(
        format!("{label}: reconstruction"),
        basis.norm(&diff) / fnorm2.sqrt().max(f64::MIN_POSITIVE),
        TOL,
    ));

    // (E_root f + sum_{Q strictly above R} Delta_Q f) h_R = E_R f h_R
    let mut tagged = 0.0f64;
    let cubes = sys.cubes();
    let integrals = basis.integrals(&f)?;
    let coeffs = basis.coefficients(&f)?;
    for rq in 0..sys.len() {
        if basis.functions(rq).is_empty() {
            continue;
        }
        let avg_r = integrals[rq] / basis.mass(rq);
        let mut chain = Vec::new();
        let mut c = cubes[rq].parent;
        while let Some(q) = c {
            chain.push(q);
            c = cubes[q].parent;
        }
        let root = chain.last().copied().unwrap_or(rq);
        let mut s = vec![0.0; n];
        for &q in &chain {
            basis.add_combination(q, &coeffs[q], &mut s);
        }
        let root_avg = integrals[root] / basis.mass(root);
        for h in basis.functions(rq) {
            let hp = basis.to_points(h);
            for &x in &cubes[rq].members {
                if hp[x] != 0.0 && w.atoms()[x] > 0.0 {
                    let lhs = (root_avg + s[x]) * hp[x];
                    tagged = tagged.max((lhs - avg_r * hp[x]).abs());
                }
            }
        }
    }
    out.push(Check::at_most(
        format!("{label}: tagged identity"),
        tagged,
        TOL,
    ));

    // w need not be doubling, so the constant is informational here
    let ns = basis.norm_scaling();
    out.push(Check::new(
        format!("{label}: norm scaling (w)"),
        ns.constant.is_finite(),
        ns.constant,
        "info",
    ));
    Ok(out)
}

/// Norm-scaling constants of the basis adapted to the base measure. They
/// are reported, not bounded: boundary slivers of shifted grids make them
/// grow with the resolution.
pub fn norm_scaling_checks(sys: &DyadicSystem, label: &str) -> Result<Vec<Check>> {
    let ns = HaarBasis::build(sys, sys.space().mu())?.norm_scaling();
    Ok(vec![
        Check::new(
            format!("{label}: norm scaling (mu)"),
            ns.constant.is_finite(),
            ns.constant,
            "reported",
        ),
        Check::new(
            format!("{label}: L1 x Linf scaling (mu)"),
            ns.l1_linf_constant.is_finite(),
            ns.l1_linf_constant,
            "",
        ),
    ])
}

fn operator_checks(ws: &Workspace) -> Result<Vec<Check>> {
    let m = &ws.matrix;
    let kv = m.validate(20_000, ws.seed);
    let mut out = vec![
        Check::new(
            "size constant finite",
            kv.size_constant.is_finite(),
            kv.size_constant,
            "",
        ),
        Check::new(
            "smoothness constant finite",
            kv.smoothness_constant.is_finite(),
            kv.smoothness_constant,
            "",
        ),
    ];
    let n = m.len();
    if m.kernel().is_antisymmetric() {
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((m.entry(i, j) + m.entry(j, i)).abs());
            }
        }
        out.push(Check::at_most("antisymmetry", worst, 0.0));
    }
    let mut r = rng::stream(ws.seed, "adjoint");
    let f: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let tf = m.apply_forward(&f, &ws.u)?;
    let tg = m.apply_adjoint(&g, &ws.v)?;
    let lhs: f64 = tf
        .iter()
        .zip(&g)
        .zip(ws.v.atoms())
        .map(|((a, b), w)| a * b * w)
        .sum();
    let rhs: f64 = f
        .iter()
        .zip(&tg)
        .zip(ws.u.atoms())
        .map(|((a, b), w)| a * b * w)
        .sum();
    out.push(Check::at_most(
        "adjoint identity",
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0),
        TOL,
    ));
    Ok(out)
}

/// Cubes of a 1D Lebesgue system whose balls `B(x_Q, l + dist)` stay inside
/// the domain for every `y` of `support`.
fn interior_support(sys: &DyadicSystem, q: usize, domain: [f64; 2]) -> Vec<usize> {
    let cube = &sys.cubes()[q];
    let Some((a, b)) = cube.interval else {
        return Vec::new();
    };
    let c = 0.5 * (a + b);
    (0..sys.space().len())
        .filter(|&y| {
            let rho = cube.side + sys.dist_unchecked(y, q);
            c - rho >= domain[0] && c + rho <= domain[1]
        })
        .collect()
}

/// `max |K(Q, w) / P(w, Q) - 1/2|` over interior cubes of side at least two
/// cells, with `w` the base measure restricted to the untruncated points.
pub fn poisson_identity_error(sys: &DyadicSystem, domain: [f64; 2]) -> Result<(f64, usize)> {
    let space = sys.space();
    let h = space.resolution();
    let mut worst = 0.0f64;
    let mut count = 0;
    for q in 0..sys.len() {
        if sys.cubes()[q].side < 2.0 * h * (1.0 - 1e-9) {
            continue;
        }
        let support = interior_support(sys, q, domain);
        if support.is_empty() {
            continue;
        }
        let w = space.mu().restrict(&support);
        let k = poisson_k(sys, q, &w, 1.0)?;
        let p = classical_poisson_1d(sys, q, &w)?;
        worst = worst.max((k / p - 0.5).abs());
        count += 1;
    }
    Ok((worst, count))
}

fn constants_checks(ws: &Workspace) -> Result<Vec<Check>> {
    let (per_grid, pooled) = ws.constants()?;
    let mut out = Vec::new();
    for (g, r) in per_grid.iter().enumerate() {
        out.push(Check::new(
            format!("grid {g}: testing <= norm"),
            r.necessity_holds(),
            r.testing.max(r.testing_dual) - r.norm,
            format!("norm = {:.6}", r.norm),
        ));
    }
    out.push(Check::new(
        "all constants finite",
        finite(&pooled),
        pooled.ratio,
        "ratio",
    ));
    // the identity is exact when cube edges fall on cell edges, i.e. dyadic cells
    let spec = &ws.scenario.space;
    let h = (spec.domain[1] - spec.domain[0]) / ws.space.len() as f64;
    let dyadic = h.log2().fract() == 0.0 && (spec.domain[0] / h).fract() == 0.0;
    if spec.kind == SpaceKind::Grid1d
        && spec.base_measure == BaseKind::Lebesgue
        && dyadic
        && ws.params.kappa == 1.0
    {
        let (err, count) = poisson_identity_error(&ws.systems[0], spec.domain)?;
        if count > 0 {
            out.push(Check::at_most(
                format!("K = P/2 on {count} interior cubes"),
                err,
                1e-9,
            ));
        }
    }
    Ok(out)
}

fn finite(r: &ConstantsReport) -> bool {
    [
        r.a2,
        r.a2_dual,
        r.testing,
        r.testing_dual,
        r.pivotal,
        r.pivotal_dual,
        r.norm,
    ]
    .iter()
    .all(|x| x.is_finite())
}

fn corona_checks(ws: &Workspace) -> Result<Vec<Check>> {
    let (per_grid, _) = ws.constants()?;
    let mut out = Vec::new();
    if ws.u.is_zero() {
        out.push(Check::new("u vanishes; no coronas", true, 0.0, ""));
        return Ok(out);
    }
    let c = ws.corona(0, &per_grid[0], &[CoronaMode::StoppingMass])?;
    let mass = &c.checks[0];
    out.push(Check::new(
        "stopping mass <= 1/4",
        mass.passed == Some(true),
        mass.constant,
        format!("{} stopping cubes", c.stopping_cubes),
    ));
    let decay_ok = mass
        .generation_mass
        .iter()
        .enumerate()
        .all(|(k, m)| *m <= 0.25f64.powi(k as i32) * (1.0 + 1e-12));
    out.push(Check::new(
        "generation decay 4^-(k-1)",
        decay_ok,
        mass.generation_mass.last().copied().unwrap_or(0.0),
        "",
    ));
    if let Some(p) = c.projection {
        out.push(Check::new(
            "projection bound",
            p.holds(),
            p.lhs,
            format!("<= {:.6}", p.rhs),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{Scenario, WeightSpec};

    #[test]
    fn suites_pass_on_a_line() {
        let mut s = Scenario::line(64, WeightSpec::Lognormal { sigma: 0.5 }, 2);
        s.grids = 2;
        let ws = Workspace::prepare(&s, 2).unwrap();
        for m in Module::ALL {
            let r = run_suite(&ws, m).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn module_names() {
        assert!("galaxy".parse::<Module>().is_err());
        assert_eq!("haar".parse::<Module>().unwrap(), Module::Haar);
    }
}
