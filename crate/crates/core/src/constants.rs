//! The scalar functionals of the two-weight inequality: the Poisson-type
//! functional `K(Q, w)`, the `A2`, testing and pivotal constants, the
//! operator norm, the Carleson embedding constants, and the empirical
//! constants of the off-support and decay lemmas.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::dyadic::DyadicSystem;
use crate::error::{Error, Result};
use crate::haar::HaarBasis;
use crate::operators::OperatorMatrix;
use crate::rng;
use crate::space::Measure;

/// Above this size the operator norm uses power iteration.
pub const DENSE_SVD_LIMIT: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TwoWeightParams {
    pub kappa: f64,
    pub n_dim: f64,
    /// Decay exponent, `0 < lambda < kappa / (n + kappa)`.
    pub lambda: f64,
}

impl Default for TwoWeightParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            n_dim: 1.0,
            lambda: 0.2,
        }
    }
}

impl TwoWeightParams {
    pub fn new(kappa: f64, n_dim: f64, lambda: f64) -> Result<Self> {
        let p = Self {
            kappa,
            n_dim,
            lambda,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::param(format!(
                "kappa must lie in (0, 1], got {}",
                self.kappa
            )));
        }
        if !(self.n_dim > 0.0) {
            return Err(Error::param(format!(
                "n must be positive, got {}",
                self.n_dim
            )));
        }
        let cap = self.kappa / (self.n_dim + self.kappa);
        if !(self.lambda > 0.0 && self.lambda < cap) {
            return Err(Error::param(format!(
                "lambda must lie in (0, {cap}), got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `sigma0 = lambda (n + kappa) - kappa`, negative for admissible lambda.
    pub fn sigma0(&self) -> f64 {
        self.lambda * (self.n_dim + self.kappa) - self.kappa
    }

    pub fn gamma_decay(&self) -> f64 {
        -self.sigma0()
    }
}

/// Row `S` holds the weights `(l/(l + dist(y,S)))^kappa / mu(B(x_S, l + dist(y,S)))`,
/// so that `K(S, w) = sum_y row[y] w_y`.
pub struct PoissonTable {
    n: usize,
    kappa: f64,
    rows: Vec<f64>,
}

impl PoissonTable {
    pub fn build(system: &DyadicSystem, kappa: f64) -> Self {
        let space = system.space();
        let n = space.len();
        let mut rows = vec![0.0; n * system.len()];
        for (q, cube) in system.cubes().iter().enumerate() {
            let dist = system.dist_row(q);
            let l = cube.side;
            for (y, slot) in rows[q * n..(q + 1) * n].iter_mut().enumerate() {
                let rho = l + dist[y];
                let ball = space.ball_mu_at_unchecked(cube.anchor, rho);
                *slot = (l / rho).powf(kappa) / ball;
            }
        }
        Self { n, kappa, rows }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.rows[q * self.n..(q + 1) * self.n]
    }

    /// `K(Q, w)`.
    pub fn k(&self, q: usize, w: &[f64]) -> f64 {
        self.row(q).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    /// `K(Q, 1_E w)` for a point set `E`.
    pub fn k_on(&self, q: usize, w: &[f64], set: &[usize]) -> f64 {
        let row = self.row(q);
        set.iter().map(|&y| row[y] * w[y]).sum()
    }
}

/// `K(Q, w)` for a single cube, evaluated directly.
pub fn poisson_k(system: &DyadicSystem, q: usize, w: &Measure, kappa: f64) -> Result<f64> {
    let cube = system.cube(q)?;
    let space = system.space();
    if w.len() != space.len() {
        return Err(Error::DimensionMismatch(
            "weight length differs from the space".into(),
        ));
    }
    if !(cube.side > 0.0) {
        return Err(Error::param("cube side must be positive"));
    }
    let mut total = 0.0;
    for (y, &wy) in w.atoms().iter().enumerate() {
        if wy == 0.0 {
            continue;
        }
        let rho = cube.side + system.dist_unchecked(y, q);
        let ball = space.ball_mu_at(cube.anchor, rho)?;
        if ball <= 0.0 {
            return Err(Error::ZeroMeasure(format!(
                "ball of radius {rho} around cube {q}"
            )));
        }
        total += (cube.side / rho).powf(kappa) * wy / ball;
    }
    Ok(total)
}

/// `P(w, I) = sum_y |I| / (|I| + dist(y, I))^2 w_y` for an interval cube.
pub fn classical_poisson_1d(system: &DyadicSystem, q: usize, w: &Measure) -> Result<f64> {
    let cube = system.cube(q)?;
    if system.space().embedding_dim() != Some(1) {
        return Err(Error::DimensionMismatch(
            "the classical Poisson integral needs a 1D space".into(),
        ));
    }
    let l = cube.side;
    Ok(w.atoms()
        .iter()
        .enumerate()
        .map(|(y, &wy)| {
            let d = system.dist_unchecked(y, q);
            l / ((l + d) * (l + d)) * wy
        })
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DualPair {
    pub forward: f64,
    pub dual: f64,
    pub argmax_forward: Option<usize>,
    pub argmax_dual: Option<usize>,
}

impl DualPair {
    pub fn max(&self) -> f64 {
        self.forward.max(self.dual)
    }
}

fn argmax(values: impl Iterator<Item = (usize, f64)>) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (q, v) in values {
        if best.1.is_none() || v > best.0 {
            best = (v, Some(q));
        }
    }
    best
}

/// `A2 = max over cubes of sqrt(u(Q) K(Q, v) / l(Q)^n)` and the dual.
pub fn a2_constant(
    system: &DyadicSystem,
    table: &PoissonTable,
    u: &Measure,
    v: &Measure,
    n_dim: f64,
) -> DualPair {
    let one = |a: &Measure, b: &Measure| {
        argmax(system.cubes().iter().map(|c| {
            let val = a.mass(&c.members) * table.k(c.id, b.atoms()) / c.side.powf(n_dim);
            (c.id, val.sqrt())
        }))
    };
    let (forward, argmax_forward) = one(u, v);
    let (dual, argmax_dual) = one(v, u);
    DualPair {
        forward,
        dual,
        argmax_forward,
        argmax_dual,
    }
}

/// `||1_Q T(u 1_Q)||_{L^2(v)}` squared.
fn local_testing_sq(m: &OperatorMatrix, members: &[usize], u: &[f64], v: &[f64]) -> f64 {
    members
        .iter()
        .map(|&x| {
            let t: f64 = members.iter().map(|&y| m.entry(x, y) * u[y]).sum();
            v[x] * t * t
        })
        .sum()
}

fn testing_one(
    system: &DyadicSystem,
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
    adjoint: bool,
) -> Result<(f64, Option<usize>)> {
    let (u, v) = (u.atoms(), v.atoms());
    let mut any = false;
    let mut best = (0.0, None);
    for c in system.cubes() {
        let uq: f64 = c.members.iter().map(|&x| u[x]).sum();
        if uq <= 0.0 {
            continue;
        }
        any = true;
        let sq = if adjoint {
            c.members
                .iter()
                .map(|&x| {
                    let t: f64 = c.members.iter().map(|&y| m.entry(y, x) * u[y]).sum();
                    v[x] * t * t
                })
                .sum()
        } else {
            local_testing_sq(m, &c.members, u, v)
        };
        let val = (sq / uq).sqrt();
        if best.1.is_none() || val > best.0 {
            best = (val, Some(c.id));
        }
    }
    if !any {
        return Err(Error::ZeroMeasure(
            "every cube is null for the testing weight".into(),
        ));
    }
    Ok(best)
}

/// Testing constants: `max ||1_Q T(u 1_Q)||_{L^2(v)} / u(Q)^{1/2}` over
/// cubes with `u(Q) > 0`, and the same for the adjoint with `u`, `v` swapped.
pub fn testing_constant(
    system: &DyadicSystem,
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
) -> Result<DualPair> {
    let (forward, argmax_forward) = testing_one(system, m, u, v, false)?;
    // the dual inequality is vacuous when v vanishes
    let (dual, argmax_dual) = if v.is_zero() {
        (0.0, None)
    } else {
        testing_one(system, m, v, u, true)?
    };
    Ok(DualPair {
        forward,
        dual,
        argmax_forward,
        argmax_dual,
    })
}

/// Which subpartitions the pivotal supremum ranges over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotalMode {
    /// All subpartitions, the trivial one `{Q}` included.
    #[default]
    IncludeSelf,
    /// Only subpartitions into strict subcubes.
    Proper,
}

/// `Psi(q, 1_E u)`: the supremum over dyadic subpartitions of `q` of
/// `sum v(Q_i) K(Q_i, 1_E u)^2`, by the recursion
/// `Psi(Q) = max(Phi(Q), sum over children Psi(child))`. When `good` is
/// given, only cubes flagged good may be used as pieces.
pub fn pivotal_psi(
    system: &DyadicSystem,
    table: &PoissonTable,
    q: usize,
    e_set: &[usize],
    u: &Measure,
    v: &Measure,
    mode: PivotalMode,
    good: Option<&[bool]>,
) -> Result<f64> {
    system.cube(q)?;
    let desc = system.descendants(q);
    let phi: Vec<f64> = desc
        .iter()
        .map(|&s| {
            let k = table.k_on(s, u.atoms(), e_set);
            v.mass(&system.cubes()[s].members) * k * k
        })
        .collect();
    Ok(psi_from_phi(system, &desc, &phi, mode, good))
}

/// Runs the recursion on a breadth-first list of descendants of `desc[0]`.
fn psi_from_phi(
    system: &DyadicSystem,
    desc: &[usize],
    phi: &[f64],
    mode: PivotalMode,
    good: Option<&[bool]>,
) -> f64 {
    let incl = psi_values(system, desc, phi, good);
    let children = &system.cubes()[desc[0]].children;
    if mode == PivotalMode::IncludeSelf || children.is_empty() {
        return incl[0];
    }
    children
        .iter()
        .map(|c| incl[desc.iter().position(|d| d == c).unwrap()])
        .sum()
}

/// `Psi` with the trivial partition allowed, for every cube of a
/// breadth-first descendant list.
pub(crate) fn psi_values(
    system: &DyadicSystem,
    desc: &[usize],
    phi: &[f64],
    good: Option<&[bool]>,
) -> Vec<f64> {
    let mut pos = std::collections::HashMap::with_capacity(desc.len());
    for (i, &s) in desc.iter().enumerate() {
        pos.insert(s, i);
    }
    let mut psi = vec![0.0; desc.len()];
    for i in (0..desc.len()).rev() {
        let s = desc[i];
        let own = if good.is_none_or(|g| g[s]) {
            phi[i]
        } else {
            0.0
        };
        let children = &system.cubes()[s].children;
        psi[i] = if children.is_empty() {
            own
        } else {
            own.max(children.iter().map(|c| psi[pos[c]]).sum())
        };
    }
    psi
}

/// `Psi` under `mode` for every cube of a breadth-first descendant list.
pub(crate) fn psi_values_mode(
    system: &DyadicSystem,
    desc: &[usize],
    phi: &[f64],
    mode: PivotalMode,
    good: Option<&[bool]>,
) -> Vec<f64> {
    let incl = psi_values(system, desc, phi, good);
    if mode == PivotalMode::IncludeSelf {
        return incl;
    }
    let mut pos = std::collections::HashMap::with_capacity(desc.len());
    for (i, &s) in desc.iter().enumerate() {
        pos.insert(s, i);
    }
    (0..desc.len())
        .map(|i| {
            let children = &system.cubes()[desc[i]].children;
            if children.is_empty() {
                incl[i]
            } else {
                children.iter().map(|c| incl[pos[c]]).sum()
            }
        })
        .collect()
}

fn pivotal_one(
    system: &DyadicSystem,
    table: &PoissonTable,
    u: &Measure,
    v: &Measure,
    mode: PivotalMode,
    good: Option<&[bool]>,
) -> Result<(f64, Option<usize>)> {
    let mut any = false;
    let mut best = (0.0, None);
    let vmass: Vec<f64> = system.cubes().iter().map(|c| v.mass(&c.members)).collect();
    for c in system.cubes() {
        let uq = u.mass(&c.members);
        if uq <= 0.0 {
            continue;
        }
        any = true;
        let desc = system.descendants(c.id);
        let phi: Vec<f64> = desc
            .iter()
            .map(|&s| {
                let k = table.k_on(s, u.atoms(), &c.members);
                vmass[s] * k * k
            })
            .collect();
        let psi = psi_from_phi(system, &desc, &phi, mode, good);
        let val = (psi / uq).sqrt();
        if best.1.is_none() || val > best.0 {
            best = (val, Some(c.id));
        }
    }
    if !any {
        return Err(Error::ZeroMeasure(
            "every cube is null for the pivotal weight".into(),
        ));
    }
    Ok(best)
}

/// Pivotal constants `max sqrt(Psi(Q, 1_Q u) / u(Q))` and the dual.
pub fn pivotal_constant(
    system: &DyadicSystem,
    table: &PoissonTable,
    u: &Measure,
    v: &Measure,
    mode: PivotalMode,
    good: Option<&[bool]>,
) -> Result<DualPair> {
    let (forward, argmax_forward) = pivotal_one(system, table, u, v, mode, good)?;
    let (dual, argmax_dual) = if v.is_zero() {
        (0.0, None)
    } else {
        pivotal_one(system, table, v, u, mode, good)?
    };
    Ok(DualPair {
        forward,
        dual,
        argmax_forward,
        argmax_dual,
    })
}

/// Goodness flags of every cube against the system itself and `other`.
pub fn goodness_flags(
    system: &DyadicSystem,
    other: &DyadicSystem,
    r: u32,
    eps: f64,
) -> Result<Vec<bool>> {
    (0..system.len())
        .map(|q| Ok(system.is_good(q, system, r, eps)? && system.is_good(q, other, r, eps)?))
        .collect()
}

/// `B = diag(sqrt v) K diag(sqrt u)`, row-major.
fn weighted_matrix(m: &OperatorMatrix, u: &Measure, v: &Measure) -> Result<DMatrix<f64>> {
    let n = m.len();
    if u.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch(
            "weights and operator sizes differ".into(),
        ));
    }
    let su: Vec<f64> = u.atoms().iter().map(|a| a.sqrt()).collect();
    let sv: Vec<f64> = v.atoms().iter().map(|a| a.sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| sv[i] * m.entry(i, j) * su[j]))
}

/// Operator norm of `f -> T(f u)` from `L^2(u)` to `L^2(v)`: the largest
/// singular value of `B`. Dense SVD up to [`DENSE_SVD_LIMIT`] points,
/// power iteration beyond.
pub fn operator_norm(m: &OperatorMatrix, u: &Measure, v: &Measure) -> Result<f64> {
    if m.len() <= DENSE_SVD_LIMIT {
        let b = weighted_matrix(m, u, v)?;
        Ok(b.singular_values().iter().copied().fold(0.0, f64::max))
    } else {
        Ok(power_iteration_norm(m, u, v, 1e-10, 20_000, 0)?.norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerIteration {
    pub norm: f64,
    /// `sqrt(theta)` for the final Rayleigh quotient `theta` of `B^T B`.
    pub lower: f64,
    /// `sqrt(theta + ||r||)`: the residual bracket of the converged eigenvalue.
    pub upper: f64,
    pub iterations: usize,
}

/// Power iteration on `B^T B` from a seeded random start. Stops when the
/// residual `||B^T B x - theta x||` falls below `tol * theta`.
pub fn power_iteration_norm(
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<PowerIteration> {
    use rand::Rng;
    let n = m.len();
    if u.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch(
            "weights and operator sizes differ".into(),
        ));
    }
    let su: Vec<f64> = u.atoms().iter().map(|a| a.sqrt()).collect();
    let sv: Vec<f64> = v.atoms().iter().map(|a| a.sqrt()).collect();
    let entries = m.entries();
    let apply = |x: &[f64]| -> Vec<f64> {
        let xs: Vec<f64> = x.iter().zip(&su).map(|(a, b)| a * b).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                sv[i]
                    * entries[i * n..(i + 1) * n]
                        .iter()
                        .zip(&xs)
                        .map(|(k, z)| k * z)
                        .sum::<f64>()
            })
            .collect();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let yi = y[i] * sv[i];
            if yi != 0.0 {
                for (zj, k) in z.iter_mut().zip(&entries[i * n..(i + 1) * n]) {
                    *zj += k * yi;
                }
            }
        }
        z.iter_mut().zip(&su).for_each(|(a, b)| *a *= b);
        z
    };
    let norm2 = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut r = rng::stream(seed, "power-iteration");
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|a| *a /= nx);
    let (mut theta, mut resid) = (0.0, f64::INFINITY);
    for it in 1..=max_iter {
        let ax = apply(&x);
        theta = x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>();
        resid = norm2(
            &ax.iter()
                .zip(&x)
                .map(|(a, b)| a - theta * b)
                .collect::<Vec<_>>(),
        );
        let na = norm2(&ax);
        if na == 0.0 {
            return Ok(PowerIteration {
                norm: 0.0,
                lower: 0.0,
                upper: 0.0,
                iterations: it,
            });
        }
        if resid <= tol * theta {
            let lower = theta.max(0.0).sqrt();
            return Ok(PowerIteration {
                norm: lower,
                lower,
                upper: (theta + resid).sqrt(),
                iterations: it,
            });
        }
        x = ax.into_iter().map(|a| a / na).collect();
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        lower: theta.max(0.0).sqrt(),
        upper: (theta + resid).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CarlesonConstants {
    /// Largest eigenvalue of `f -> sum a_Q (avg_Q^u f)^2` on `L^2(u)`.
    pub c_embed: f64,
    /// `max over S of sum_{Q in S} a_Q / u(S)`.
    pub c_carleson: f64,
}

/// Carleson embedding and Carleson measure constants of the coefficients `a`.
pub fn carleson_embedding(
    system: &DyadicSystem,
    u: &Measure,
    a: &[f64],
) -> Result<CarlesonConstants> {
    if a.len() != system.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for {} cubes",
            a.len(),
            system.len()
        )));
    }
    if let Some(q) = a.iter().position(|&x| !(x >= 0.0)) {
        return Err(Error::param(format!("coefficient of cube {q} is negative")));
    }
    let cubes = system.cubes();
    let umass: Vec<f64> = cubes.iter().map(|c| u.mass(&c.members)).collect();
    if let Some(q) = (0..cubes.len()).find(|&q| a[q] > 0.0 && umass[q] <= 0.0) {
        return Err(Error::ZeroMeasure(format!(
            "cube {q} has a positive coefficient but no u-mass"
        )));
    }
    // subtree sums, finest first
    let mut sub = a.to_vec();
    for q in system.bottom_up() {
        if let Some(p) = cubes[q].parent {
            sub[p] += sub[q];
        }
    }
    let c_carleson = (0..cubes.len())
        .filter(|&q| umass[q] > 0.0)
        .map(|q| sub[q] / umass[q])
        .fold(0.0, f64::max);

    let live: Vec<usize> = (0..u.len()).filter(|&x| u.atoms()[x] > 0.0).collect();
    let mut slot = vec![usize::MAX; u.len()];
    for (i, &x) in live.iter().enumerate() {
        slot[x] = i;
    }
    let m = live.len();
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for c in cubes {
        if a[c.id] == 0.0 {
            continue;
        }
        let s = a[c.id] / (umass[c.id] * umass[c.id]);
        let idx: Vec<(usize, f64)> = c
            .members
            .iter()
            .filter(|&&x| slot[x] != usize::MAX)
            .map(|&x| (slot[x], u.atoms()[x].sqrt()))
            .collect();
        for &(i, wi) in &idx {
            for &(j, wj) in &idx {
                mat[(i, j)] += s * wi * wj;
            }
        }
    }
    let c_embed = if m == 0 {
        0.0
    } else {
        SymmetricEigen::new(mat)
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max)
    };
    Ok(CarlesonConstants {
        c_embed,
        c_carleson,
    })
}

/// Cubes to visit as `S` in a lemma diagnostic: all when few, a seeded
/// sample otherwise.
fn sample_cubes(candidates: Vec<usize>, samples: usize, seed: u64, name: &str) -> Vec<usize> {
    if candidates.len() <= samples {
        return candidates;
    }
    let mut c = candidates;
    c.shuffle(&mut rng::stream(seed, name));
    c.truncate(samples);
    c.sort_unstable();
    c
}

/// Chain `S = A_0, A_1, ...` of dyadic ancestors up to the root.
fn chain(system: &DyadicSystem, s: usize) -> Vec<usize> {
    let mut out = vec![s];
    while let Some(p) = system.cubes()[*out.last().unwrap()].parent {
        out.push(p);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LemmaRatio {
    /// Largest observed left side / right side.
    pub constant: f64,
    /// Number of admissible samples with a positive right side.
    pub samples: usize,
}

/// Empirical constant of the off-support estimate
/// `|<T(u 1_{Qhat \ Q'}), H_S>_v| <= C ||H_S||_{L^2(v)} Phi(S, 1_{Qhat \ Q'} u)^{1/2}`
/// over triples `S < Q' < Qhat` with `dist(S, X \ Q') >= l(S)` and `H_S`
/// ranging over the cancellative `v`-Haar functions of `S`.
pub fn offsupport_ratio(
    system: &DyadicSystem,
    table: &PoissonTable,
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
    samples: usize,
    seed: u64,
) -> Result<LemmaRatio> {
    let basis = HaarBasis::build(system, v)?;
    let n = u.len();
    let cubes = system.cubes();
    let candidates: Vec<usize> = (0..system.len())
        .filter(|&s| !basis.functions(s).is_empty() && cubes[s].parent.is_some())
        .collect();
    let mut out = LemmaRatio::default();
    let mut admissible = false;
    for s in sample_cubes(candidates, samples, seed, "offsupport") {
        let anc = chain(system, s);
        let vs = basis.mass(s);
        for h in basis.functions(s) {
            let hp = basis.to_points(h);
            // g = T*(H v), so <T(u 1_E), H>_v = sum_{y in E} u_y g_y
            let g = m.apply_adjoint(&hp, v)?;
            let hnorm = basis.norm(&hp);
            let ug: Vec<f64> = (0..n).map(|y| u.atoms()[y] * g[y]).collect();
            let sums: Vec<f64> = anc
                .iter()
                .map(|&a| cubes[a].members.iter().map(|&y| ug[y]).sum())
                .collect();
            let ks: Vec<f64> = anc
                .iter()
                .map(|&a| table.k_on(s, u.atoms(), &cubes[a].members))
                .collect();
            for i in 1..anc.len() {
                if system.dist_cube_to_complement(s, anc[i]) < cubes[s].side {
                    continue;
                }
                for j in i + 1..anc.len() {
                    admissible = true;
                    let lhs = (sums[j] - sums[i]).abs();
                    let k = ks[j] - ks[i];
                    let rhs = hnorm * (vs * k * k).sqrt();
                    if rhs > 0.0 {
                        out.constant = out.constant.max(lhs / rhs);
                        out.samples += 1;
                    }
                }
            }
        }
    }
    if !admissible {
        return Err(Error::NoAdmissible(
            "no triple S < Q' < Qhat with dist(S, X \\ Q') >= l(S)".into(),
        ));
    }
    Ok(out)
}

/// Empirical constant of the decay estimate
/// `K(S, 1_{Qhat \ Q} u) (l(S) / l(Q))^sigma0 <= C K(Q, 1_{Qhat \ Q} u)`
/// over triples `S < Q < Qhat` with
/// `dist(S, e(Q)) >= l(S)^lambda l(Q)^(1-lambda) / 2`, where `e(Q)` is the
/// boundary of `Q` together with its center.
pub fn decay_ratio(
    system: &DyadicSystem,
    table: &PoissonTable,
    u: &Measure,
    params: &TwoWeightParams,
    samples: usize,
    seed: u64,
) -> Result<LemmaRatio> {
    params.validate()?;
    let cubes = system.cubes();
    let sigma0 = params.sigma0();
    let candidates: Vec<usize> = (0..system.len())
        .filter(|&s| cubes[s].parent.is_some())
        .collect();
    let mut out = LemmaRatio::default();
    let mut admissible = false;
    for s in sample_cubes(candidates, samples, seed, "decay") {
        let anc = chain(system, s);
        let ks: Vec<f64> = anc
            .iter()
            .map(|&a| table.k_on(s, u.atoms(), &cubes[a].members))
            .collect();
        for i in 1..anc.len() {
            let q = anc[i];
            let threshold =
                0.5 * cubes[s].side.powf(params.lambda) * cubes[q].side.powf(1.0 - params.lambda);
            let to_center = cubes[s]
                .members
                .iter()
                .map(|&y| system.space().d(y, cubes[q].center))
                .fold(f64::INFINITY, f64::min);
            if to_center < threshold || system.dist_cube_to_complement(s, q) < threshold {
                continue;
            }
            let kq_all: Vec<f64> = anc[i + 1..]
                .iter()
                .map(|&a| table.k_on(q, u.atoms(), &cubes[a].members))
                .collect();
            let kq_self = table.k_on(q, u.atoms(), &cubes[q].members);
            for (jj, &_qhat) in anc[i + 1..].iter().enumerate() {
                admissible = true;
                let j = i + 1 + jj;
                let ks_e = ks[j] - ks[i];
                let kq_e = kq_all[jj] - kq_self;
                if kq_e > 0.0 && ks_e > 0.0 {
                    let ratio = ks_e / kq_e * (cubes[s].side / cubes[q].side).powf(sigma0);
                    out.constant = out.constant.max(ratio);
                    out.samples += 1;
                }
            }
        }
    }
    if !admissible {
        return Err(Error::NoAdmissible(
            "no triple S < Q < Qhat clears the distance hypothesis".into(),
        ));
    }
    Ok(out)
}

/// Weak boundedness constant: max over `rho`-close pairs `(Q, S)` of
/// `|int_S T(u 1_Q) dv| / (u(Q) v(S))^{1/2}`.
pub fn weak_boundedness(
    system_u: &DyadicSystem,
    system_v: &DyadicSystem,
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
    rho: u32,
) -> Result<LemmaRatio> {
    let delta = system_u.delta();
    let lo = delta.powi(rho as i32) * (1.0 - 1e-12);
    let hi = delta.powi(-(rho as i32)) * (1.0 + 1e-12);
    let mut out = LemmaRatio::default();
    let mut pairs = 0usize;
    for q in system_u.cubes() {
        let uq = u.mass(&q.members);
        for s in system_v.cubes() {
            let ratio = q.side / s.side;
            if ratio < lo || ratio > hi {
                continue;
            }
            let dist = s
                .members
                .iter()
                .map(|&y| system_u.dist_unchecked(y, q.id))
                .fold(f64::INFINITY, f64::min);
            if dist > q.side.max(s.side) {
                continue;
            }
            pairs += 1;
            let vs = v.mass(&s.members);
            if uq <= 0.0 || vs <= 0.0 {
                continue;
            }
            let num: f64 = s
                .members
                .iter()
                .map(|&x| {
                    v.atoms()[x]
                        * q.members
                            .iter()
                            .map(|&y| m.entry(x, y) * u.atoms()[y])
                            .sum::<f64>()
                })
                .sum();
            out.constant = out.constant.max(num.abs() / (uq * vs).sqrt());
            out.samples += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::NoAdmissible(format!("no {rho}-close cube pairs")));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConstantsReport {
    pub a2: f64,
    pub a2_dual: f64,
    pub testing: f64,
    pub testing_dual: f64,
    pub pivotal: f64,
    pub pivotal_dual: f64,
    pub norm: f64,
    /// `norm / (A2 + T + V)` with each constant taken as the max of its two
    /// directions; infinite only when the denominator vanishes while the
    /// norm does not.
    pub ratio: f64,
    pub common_atom: bool,
    pub pivotal_mode: PivotalMode,
    pub argmax: Argmax,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Argmax {
    pub a2: Option<usize>,
    pub a2_dual: Option<usize>,
    pub testing: Option<usize>,
    pub testing_dual: Option<usize>,
    pub pivotal: Option<usize>,
    pub pivotal_dual: Option<usize>,
}

impl ConstantsReport {
    pub fn denominator(&self) -> f64 {
        self.a2.max(self.a2_dual)
            + self.testing.max(self.testing_dual)
            + self.pivotal.max(self.pivotal_dual)
    }

    /// Recomputes `ratio` from the stored constants.
    pub fn with_ratio(mut self) -> Self {
        let den = self.denominator();
        self.ratio = if self.norm == 0.0 {
            0.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            self.norm / den
        };
        self
    }

    /// Whether the testing constants stay below the norm with slack `1e-9`.
    pub fn necessity_holds(&self) -> bool {
        let cap = self.norm * (1.0 + 1e-9) + 1e-12;
        self.testing <= cap && self.testing_dual <= cap
    }

    /// Combines per-grid reports by taking maxima (the norm is grid-free).
    pub fn pooled(reports: &[ConstantsReport]) -> Option<ConstantsReport> {
        let first = reports.first()?.clone();
        let r = reports.iter().skip(1).fold(first, |mut acc, r| {
            macro_rules! take {
                ($f:ident) => {
                    if r.$f > acc.$f {
                        acc.$f = r.$f;
                        acc.argmax.$f = r.argmax.$f;
                    }
                };
            }
            take!(a2);
            take!(a2_dual);
            take!(testing);
            take!(testing_dual);
            take!(pivotal);
            take!(pivotal_dual);
            acc.norm = acc.norm.max(r.norm);
            acc.common_atom |= r.common_atom;
            acc
        });
        Some(r.with_ratio())
    }
}

/// All constants on one system. `norm` is passed in so it can be shared
/// across grids.
#[allow(clippy::too_many_arguments)]
pub fn constants_report(
    system: &DyadicSystem,
    table: &PoissonTable,
    m: &OperatorMatrix,
    u: &Measure,
    v: &Measure,
    params: &TwoWeightParams,
    mode: PivotalMode,
    good: Option<&[bool]>,
    norm: f64,
) -> Result<ConstantsReport> {
    let a2 = a2_constant(system, table, u, v, params.n_dim);
    let t = testing_constant(system, m, u, v)?;
    let p = pivotal_constant(system, table, u, v, mode, good)?;
    Ok(ConstantsReport {
        a2: a2.forward,
        a2_dual: a2.dual,
        testing: t.forward,
        testing_dual: t.dual,
        pivotal: p.forward,
        pivotal_dual: p.dual,
        norm,
        ratio: 0.0,
        common_atom: !u.common_atoms(v).is_empty(),
        pivotal_mode: mode,
        argmax: Argmax {
            a2: a2.argmax_forward,
            a2_dual: a2.argmax_dual,
            testing: t.argmax_forward,
            testing_dual: t.argmax_dual,
            pivotal: p.argmax_forward,
            pivotal_dual: p.argmax_dual,
        },
    }
    .with_ratio())
}

/// Every dyadic subpartition of `q`, as lists of cube ids.
pub fn enumerate_subpartitions(system: &DyadicSystem, q: usize) -> Vec<Vec<usize>> {
    let children = &system.cubes()[q].children;
    let mut out = vec![vec![q]];
    if children.is_empty() {
        return out;
    }
    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for &c in children {
        let parts = enumerate_subpartitions(system, c);
        let mut next = Vec::with_capacity(combos.len() * parts.len());
        for base in &combos {
            for p in &parts {
                let mut v = base.clone();
                v.extend_from_slice(p);
                next.push(v);
            }
        }
        combos = next;
    }
    out.extend(combos);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::DyadicParams;
    use crate::operators::{Kernel, KernelKind};
    use crate::space::{BaseMeasure, Space};
    use rand::Rng;
    use std::sync::Arc;

    fn two_point() -> (DyadicSystem, OperatorMatrix, Measure, Measure) {
        let s = Arc::new(
            Space::from_coords(vec![vec![0.75], vec![0.25]], vec![0.5, 0.5], 1.0, 1.0).unwrap(),
        );
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        let m = OperatorMatrix::assemble(s, Kernel::hilbert()).unwrap();
        (
            sys,
            m,
            Measure::new(vec![1.0, 4.0]).unwrap(),
            Measure::new(vec![9.0, 1.0]).unwrap(),
        )
    }

    #[test]
    fn two_point_hand_values() {
        let (sys, m, u, v) = two_point();
        assert_eq!(m.entry(0, 1), 2.0);
        assert_eq!(sys.roots().len(), 1);
        let t = testing_constant(&sys, &m, &u, &v).unwrap();
        assert!((t.forward - 116f64.sqrt()).abs() < 1e-12);
        let n = operator_norm(&m, &u, &v).unwrap();
        assert!((n - 12.0).abs() < 1e-12);
        let p = power_iteration_norm(&m, &u, &v, 1e-12, 1000, 1).unwrap();
        assert!((p.norm - 12.0).abs() < 1e-9);
        let wb = weak_boundedness(&sys, &sys, &m, &u, &v, 0).unwrap();
        // top cube: |9 * 8 + 1 * (-2)| / sqrt(5 * 10)
        assert!(wb.constant >= 70.0 / 50f64.sqrt() - 1e-12);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let (sys, _, u, v) = two_point();
        let z =
            OperatorMatrix::assemble(sys.space_arc().clone(), Kernel::new(KernelKind::Zero, 1.0))
                .unwrap();
        assert_eq!(operator_norm(&z, &u, &v).unwrap(), 0.0);
        let t = testing_constant(&sys, &z, &u, &v).unwrap();
        assert_eq!((t.forward, t.dual), (0.0, 0.0));
    }

    fn line_system(n: usize, seed: u64) -> DyadicSystem {
        let s = Arc::new(Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        DyadicSystem::build(s, DyadicParams::shifted1d(), seed).unwrap()
    }

    #[test]
    fn poisson_table_matches_direct_and_single_atom() {
        let sys = line_system(64, 3);
        let table = PoissonTable::build(&sys, 1.0);
        let mut r = rng::stream(3, "w");
        let w = Measure::new((0..64).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        for q in 0..sys.len() {
            let direct = poisson_k(&sys, q, &w, 1.0).unwrap();
            assert!((table.k(q, w.atoms()) - direct).abs() <= 1e-13 * direct.max(1.0));
        }
        let q = sys.level(3)[2];
        let mut atoms = vec![0.0; 64];
        atoms[60] = 1.0;
        let unit = Measure::new(atoms).unwrap();
        let l = sys.cubes()[q].side;
        let d = sys.dist_to_cube(60, q).unwrap();
        let ball = sys
            .space()
            .ball_mu_at(sys.cubes()[q].anchor, l + d)
            .unwrap();
        assert_eq!(
            poisson_k(&sys, q, &unit, 1.0).unwrap(),
            (l / (l + d)) / ball
        );
        assert_eq!(poisson_k(&sys, q, &Measure::zeros(64), 1.0).unwrap(), 0.0);
        assert_eq!(
            classical_poisson_1d(&sys, q, &unit).unwrap(),
            l / ((l + d) * (l + d))
        );
    }

    #[test]
    fn dp_matches_enumeration_on_small_tree() {
        let sys = line_system(16, 0);
        let table = PoissonTable::build(&sys, 1.0);
        let mut r = rng::stream(5, "w");
        let u = Measure::new((0..16).map(|_| r.random_range(0.1..1.0)).collect()).unwrap();
        let v = Measure::new((0..16).map(|_| r.random_range(0.1..1.0)).collect()).unwrap();
        let root = sys.roots()[0];
        let parts = enumerate_subpartitions(&sys, root);
        assert_eq!(parts.len(), 677);
        let e = &sys.cubes()[root].members;
        let phi = |s: usize| {
            let k = table.k_on(s, u.atoms(), e);
            v.mass(&sys.cubes()[s].members) * k * k
        };
        let brute = parts
            .iter()
            .map(|p| p.iter().map(|&s| phi(s)).sum::<f64>())
            .fold(0.0, f64::max);
        let dp = pivotal_psi(
            &sys,
            &table,
            root,
            e,
            &u,
            &v,
            PivotalMode::IncludeSelf,
            None,
        )
        .unwrap();
        assert!((dp - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn carleson_single_cube() {
        let s = Arc::new(Space::grid1d(5, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let sys = DyadicSystem::build(s, DyadicParams::shifted1d().with_levels(0, 0), 0).unwrap();
        let u = Measure::new(vec![1.0; 5]).unwrap();
        let c = carleson_embedding(&sys, &u, &[10.0]).unwrap();
        assert!((c.c_embed - 2.0).abs() < 1e-12 && (c.c_carleson - 2.0).abs() < 1e-12);
        let z = carleson_embedding(&sys, &u, &[0.0]).unwrap();
        assert_eq!((z.c_embed, z.c_carleson), (0.0, 0.0));
        assert!(carleson_embedding(&sys, &Measure::zeros(5), &[1.0]).is_err());
    }

    #[test]
    fn params_validation() {
        let p = TwoWeightParams::default();
        assert!((p.sigma0() + 0.6).abs() < 1e-15);
        assert!(TwoWeightParams::new(1.0, 1.0, 0.5).is_err());
    }
}
