//! Systems of dyadic cubes on a finite space.
//!
//! Two constructions are available. [`Mode::Shifted1d`] builds binary
//! intervals of side `2^-k` translated by a random shift, the classical random
//! dyadic grid on the line. [`Mode::Generic`] builds nested maximal separated
//! nets level by level on any space and hangs every net point under its
//! nearest coarser net point; the seed fixes the order in which candidates
//! are tried and breaks distance ties.
//!
//! The inner and outer ball constants `c1`, `C1` are measured on the built
//! system rather than derived.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::space::{Center, Space};

/// Bits of the random shift below the finest level that still matter.
const SHIFT_GUARD_BITS: i32 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Shifted1d,
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DyadicParams {
    pub delta: f64,
    /// Separation constant of the reference points.
    pub c0: f64,
    /// Covering constant of the reference points.
    pub big_c0: f64,
    pub k_min: Option<i32>,
    pub k_max: Option<i32>,
    pub r_good: u32,
    pub eps_good: f64,
    pub mode: Mode,
    /// Skip the `12 A0^3 C0 delta <= c0` check in generic mode.
    pub relaxed: bool,
}

impl Default for DyadicParams {
    fn default() -> Self {
        Self {
            delta: 0.5,
            c0: 1.0,
            big_c0: 1.0,
            k_min: None,
            k_max: None,
            r_good: 2,
            eps_good: 0.2,
            mode: Mode::Shifted1d,
            relaxed: false,
        }
    }
}

impl DyadicParams {
    pub fn shifted1d() -> Self {
        Self::default()
    }

    pub fn generic(delta: f64) -> Self {
        Self {
            delta,
            mode: Mode::Generic,
            ..Self::default()
        }
    }

    pub fn with_levels(mut self, k_min: i32, k_max: i32) -> Self {
        self.k_min = Some(k_min);
        self.k_max = Some(k_max);
        self
    }

    pub fn relaxed(mut self) -> Self {
        self.relaxed = true;
        self
    }

    fn validate(&self, a0: f64) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.eps_good > 0.0 && self.eps_good < 1.0) {
            return Err(Error::param(format!(
                "goodness exponent must lie in (0, 1), got {}",
                self.eps_good
            )));
        }
        if let (Some(lo), Some(hi)) = (self.k_min, self.k_max) {
            if lo > hi {
                return Err(Error::param(format!("empty level range {lo}..={hi}")));
            }
        }
        match self.mode {
            Mode::Shifted1d => {
                if self.delta != 0.5 {
                    return Err(Error::param("shifted1d mode uses delta = 1/2"));
                }
            }
            Mode::Generic => {
                if !(self.c0 > 0.0 && self.big_c0 >= self.c0) {
                    return Err(Error::param(format!(
                        "need 0 < c0 <= C0, got c0={}, C0={}",
                        self.c0, self.big_c0
                    )));
                }
                let lhs = 12.0 * a0.powi(3) * self.big_c0 * self.delta;
                if !self.relaxed && lhs > self.c0 {
                    return Err(Error::param(format!(
                        "12 A0^3 C0 delta = {lhs} exceeds c0 = {}; lower delta or set relaxed",
                        self.c0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub id: usize,
    pub level: i32,
    /// Position within its level.
    pub alpha: usize,
    /// Reference point `z` of the cube.
    pub center: usize,
    /// Center `x_Q` used by ball-based functionals: the interval midpoint for
    /// shifted 1D systems, the reference point otherwise.
    pub anchor: Center,
    /// Sorted member point indices.
    pub members: Vec<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// `l(Q) = delta^level`.
    pub side: f64,
    /// Half-open interval `[lo, hi)` for shifted 1D systems.
    pub interval: Option<(f64, f64)>,
}

pub struct DyadicSystem {
    space: Arc<Space>,
    params: DyadicParams,
    seed: u64,
    k_min: i32,
    k_max: i32,
    cubes: Vec<Cube>,
    levels: Vec<Vec<usize>>,
    point_cube: Vec<Vec<u32>>,
    /// Reference points per level (generic mode: the nets; shifted mode: the
    /// cube centers).
    nets: Vec<Vec<usize>>,
    c1: f64,
    big_c1: f64,
    dist_table: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for DyadicSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DyadicSystem")
            .field("mode", &self.params.mode)
            .field("seed", &self.seed)
            .field("levels", &(self.k_min..=self.k_max))
            .field("cubes", &self.cubes.len())
            .field("c1", &self.c1)
            .field("C1", &self.big_c1)
            .finish()
    }
}

/// Outcome of checking the structural properties of a built system.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SystemValidation {
    pub partition: bool,
    pub nested: bool,
    pub containment: bool,
    pub outer_monotone: bool,
    pub separated: bool,
    pub covering: bool,
    pub c1: f64,
    pub big_c1: f64,
    pub failures: Vec<String>,
}

impl SystemValidation {
    pub fn passed(&self) -> bool {
        self.partition
            && self.nested
            && self.containment
            && self.outer_monotone
            && self.separated
            && self.covering
    }
}

/// The random bit `omega_j` of the shift sequence for `seed`; seed 0 is the
/// unshifted grid.
pub fn shift_bit(seed: u64, j: i32) -> u64 {
    if seed == 0 {
        0
    } else {
        rng::derive_seed(seed, "shift", j as i64 as u64) & 1
    }
}

/// `s_k = sum_{k < j <= top} omega_j 2^-j`.
pub fn shift_at(seed: u64, k: i32, top: i32) -> f64 {
    (k + 1..=top)
        .map(|j| shift_bit(seed, j) as f64 * (-j as f64).exp2())
        .sum()
}

impl DyadicSystem {
    pub fn build(space: Arc<Space>, params: DyadicParams, seed: u64) -> Result<Self> {
        params.validate(space.a0())?;
        match params.mode {
            Mode::Shifted1d => build_shifted(space, params, seed),
            Mode::Generic => build_generic(space, params, seed),
        }
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn space_arc(&self) -> &Arc<Space> {
        &self.space
    }

    pub fn params(&self) -> &DyadicParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn delta(&self) -> f64 {
        self.params.delta
    }

    pub fn k_min(&self) -> i32 {
        self.k_min
    }

    pub fn k_max(&self) -> i32 {
        self.k_max
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn big_c1(&self) -> f64 {
        self.big_c1
    }

    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn cube(&self, id: usize) -> Result<&Cube> {
        self.cubes.get(id).ok_or(Error::UnknownCube(id))
    }

    pub fn level(&self, k: i32) -> &[usize] {
        if k < self.k_min || k > self.k_max {
            return &[];
        }
        &self.levels[(k - self.k_min) as usize]
    }

    pub fn roots(&self) -> &[usize] {
        self.level(self.k_min)
    }

    pub fn reference_points(&self, k: i32) -> &[usize] {
        if k < self.k_min || k > self.k_max {
            return &[];
        }
        &self.nets[(k - self.k_min) as usize]
    }

    /// The level-`k` cube containing point `x`.
    pub fn cube_of(&self, x: usize, k: i32) -> Option<usize> {
        if k < self.k_min || k > self.k_max {
            return None;
        }
        self.point_cube[(k - self.k_min) as usize]
            .get(x)
            .map(|&c| c as usize)
    }

    pub fn contains_point(&self, q: usize, x: usize) -> bool {
        self.cube_of(x, self.cubes[q].level) == Some(q)
    }

    /// True when cube `outer` contains cube `inner` (possibly equal).
    pub fn contains(&self, outer: usize, inner: usize) -> bool {
        let (o, i) = (&self.cubes[outer], &self.cubes[inner]);
        o.level <= i.level && self.cube_of(i.members[0], o.level) == Some(outer)
    }

    /// The `t`-th dyadic ancestor, `None` above the roots.
    pub fn ancestor(&self, q: usize, t: u32) -> Option<usize> {
        let mut cur = q;
        for _ in 0..t {
            cur = self.cubes[cur].parent?;
        }
        Some(cur)
    }

    /// All cubes inside `q`, including `q`, in breadth-first order.
    pub fn descendants(&self, q: usize) -> Vec<usize> {
        let mut out = vec![q];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.cubes[out[i]].children);
            i += 1;
        }
        out
    }

    /// Cube ids ordered from the finest level to the coarsest.
    pub fn bottom_up(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.iter().rev().flat_map(|l| l.iter().copied())
    }

    /// Largest number of children of any cube.
    pub fn max_children(&self) -> usize {
        self.cubes
            .iter()
            .map(|c| c.children.len())
            .max()
            .unwrap_or(0)
    }

    fn table(&self) -> &[f64] {
        self.dist_table.get_or_init(|| {
            let n = self.space.len();
            let mut t = vec![f64::INFINITY; n * self.cubes.len()];
            for q in self.bottom_up() {
                let cube = &self.cubes[q];
                // children are built after their parent, so their rows sit in `tail`
                let (head, tail) = t.split_at_mut((q + 1) * n);
                let row = &mut head[q * n..];
                if cube.children.is_empty() {
                    for (y, slot) in row.iter_mut().enumerate() {
                        *slot = cube
                            .members
                            .iter()
                            .map(|&m| self.space.d(y, m))
                            .fold(f64::INFINITY, f64::min);
                    }
                    continue;
                }
                for &c in &cube.children {
                    debug_assert!(c > q);
                    let src = &tail[(c - q - 1) * n..(c - q) * n];
                    for (a, b) in row.iter_mut().zip(src) {
                        *a = a.min(*b);
                    }
                }
            }
            t
        })
    }

    /// `dist(x, Q) = min over members q of d(x, q)`; zero for members.
    pub fn dist_to_cube(&self, x: usize, q: usize) -> Result<f64> {
        let cube = self.cube(q)?;
        if x >= self.space.len() {
            return Err(Error::UnknownPoint(x));
        }
        if cube.members.is_empty() {
            return Err(Error::EmptyCube(q));
        }
        Ok(self.dist_unchecked(x, q))
    }

    pub(crate) fn dist_unchecked(&self, x: usize, q: usize) -> f64 {
        self.table()[q * self.space.len() + x]
    }

    /// Row of `dist(., Q)` over all points.
    pub fn dist_row(&self, q: usize) -> &[f64] {
        let n = self.space.len();
        &self.table()[q * n..(q + 1) * n]
    }

    /// `dist(Q, S)` as the minimum over member pairs.
    pub fn dist_cubes(&self, q: usize, s: usize) -> f64 {
        let row = self.dist_row(q);
        self.cubes[s]
            .members
            .iter()
            .map(|&y| row[y])
            .fold(f64::INFINITY, f64::min)
    }

    /// `dist(x, X \ Q)`, infinite when `Q` is the whole space.
    pub fn dist_to_complement(&self, x: usize, q: usize) -> f64 {
        let level = self.cubes[q].level;
        let (d, o) = self.space.neighbors_unchecked(x);
        for (dist, &y) in d.iter().zip(o.iter()) {
            if self.cube_of(y as usize, level) != Some(q) {
                return *dist;
            }
        }
        f64::INFINITY
    }

    /// `dist(S, X \ Q)`: minimum over members of `S`.
    pub fn dist_cube_to_complement(&self, s: usize, q: usize) -> f64 {
        self.cubes[s]
            .members
            .iter()
            .map(|&y| self.dist_to_complement(y, q))
            .fold(f64::INFINITY, f64::min)
    }

    /// Points within `eps` of both `Q` and its complement.
    pub fn boundary_layer(&self, q: usize, eps: f64) -> Result<Vec<usize>> {
        self.cube(q)?;
        let n = self.space.len();
        let cube = &self.cubes[q];
        if cube.members.len() == n {
            return Ok(Vec::new());
        }
        let row = self.dist_row(q);
        // dist(x, X \ Q) for each x: members of the complement have 0
        let outside: Vec<usize> = (0..n).filter(|&y| !self.contains_point(q, y)).collect();
        let mut out = Vec::new();
        for x in 0..n {
            if row[x] > eps {
                continue;
            }
            let to_out = outside
                .iter()
                .map(|&y| self.space.d(x, y))
                .fold(f64::INFINITY, f64::min);
            if to_out <= eps {
                out.push(x);
            }
        }
        Ok(out)
    }

    /// Goodness of cube `q` of this system with respect to `other`: for
    /// every cube `Q1` of `other` with `l(q) <= delta^r l(Q1)`, either
    /// `dist(q, Q1)` or `dist(q, X \ Q1)` is at least `l(q)^eps l(Q1)^(1-eps)`.
    pub fn is_good(&self, q: usize, other: &DyadicSystem, r: u32, eps: f64) -> Result<bool> {
        let cube = self.cube(q)?;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::param(format!(
                "goodness exponent must lie in (0, 1), got {eps}"
            )));
        }
        if (other.delta() - self.delta()).abs() > 1e-15 {
            return Err(Error::param("goodness needs systems with the same delta"));
        }
        let row = self.dist_row(q);
        let mut order: Vec<usize> = (0..self.space.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let l = cube.side;
        let top = cube.level - r as i32;
        for k in other.k_min()..=top.min(other.k_max()) {
            let l1 = self.delta().powi(k);
            let threshold = l.powf(eps) * l1.powf(1.0 - eps);
            // the points closer than the threshold to q must all sit in one
            // cube of level k, otherwise that cube straddles them
            let mut owner = None;
            for &y in &order {
                if row[y] >= threshold {
                    break;
                }
                let c = other.cube_of(y, k);
                match owner {
                    None => owner = Some(c),
                    Some(o) if o != c => return Ok(false),
                    _ => {}
                }
            }
        }
        Ok(true)
    }

    /// Structural checks: partition, nesting, inner/outer balls, monotone
    /// outer balls, and separation/covering of the reference points.
    pub fn validate(&self) -> SystemValidation {
        let n = self.space.len();
        let delta = self.delta();
        let mut v = SystemValidation {
            partition: true,
            nested: true,
            containment: true,
            outer_monotone: true,
            separated: true,
            covering: true,
            c1: self.c1,
            big_c1: self.big_c1,
            failures: Vec::new(),
        };
        for k in self.k_min..=self.k_max {
            let mut seen = vec![0u32; n];
            for &q in self.level(k) {
                for &x in &self.cubes[q].members {
                    seen[x] += 1;
                    if self.cube_of(x, k) != Some(q) {
                        v.partition = false;
                    }
                }
            }
            if let Some(x) = seen.iter().position(|&s| s != 1) {
                v.partition = false;
                v.failures
                    .push(format!("level {k}: point {x} covered {} times", seen[x]));
            }
        }
        for cube in &self.cubes {
            let mut union: Vec<usize> = cube
                .children
                .iter()
                .flat_map(|&c| self.cubes[c].members.iter().copied())
                .collect();
            union.sort_unstable();
            if !cube.children.is_empty() && union != cube.members {
                v.nested = false;
                v.failures
                    .push(format!("cube {}: children do not tile it", cube.id));
            }
            if let Some(p) = cube.parent {
                if cube.members.iter().any(|&x| !self.contains_point(p, x)) {
                    v.nested = false;
                    v.failures
                        .push(format!("cube {} leaks out of its parent", cube.id));
                }
            }
            let z = cube.center;
            let inner = self.c1 * cube.side;
            let outer = self.big_c1 * cube.side;
            for y in 0..n {
                let d = self.space.d(z, y);
                let inside = self.contains_point(cube.id, y);
                if (d < inner && !inside) || (inside && d >= outer) {
                    v.containment = false;
                    v.failures.push(format!(
                        "cube {}: ball containment fails at point {y}",
                        cube.id
                    ));
                    break;
                }
            }
            if let Some(p) = cube.parent {
                let (zp, rp) = (self.cubes[p].center, self.big_c1 * self.cubes[p].side);
                if (0..n).any(|y| self.space.d(z, y) < outer && self.space.d(zp, y) >= rp) {
                    v.outer_monotone = false;
                    v.failures
                        .push(format!("cube {}: outer ball escapes the parent's", cube.id));
                }
            }
        }
        if self.params.mode == Mode::Generic {
            for k in self.k_min..=self.k_max {
                let net = self.reference_points(k);
                let sep = self.params.c0 * delta.powi(k);
                let cov = self.params.big_c0 * delta.powi(k);
                for (i, &a) in net.iter().enumerate() {
                    for &b in &net[i + 1..] {
                        if self.space.d(a, b) < sep {
                            v.separated = false;
                        }
                    }
                }
                for x in 0..n {
                    if !net.iter().any(|&z| self.space.d(x, z) < cov) {
                        v.covering = false;
                        v.failures
                            .push(format!("level {k}: point {x} is not covered"));
                        break;
                    }
                }
                if k > self.k_min {
                    let coarser = self.reference_points(k - 1);
                    if coarser.iter().any(|z| net.binary_search(z).is_err()) {
                        v.separated = false;
                        v.failures.push(format!("level {k}: nets are not nested"));
                    }
                }
            }
        }
        v
    }
}

/// Random system for `seed`; the same as [`DyadicSystem::build`].
pub fn sample_random_system(
    space: Arc<Space>,
    params: DyadicParams,
    seed: u64,
) -> Result<DyadicSystem> {
    DyadicSystem::build(space, params, seed)
}

fn build_shifted(space: Arc<Space>, params: DyadicParams, seed: u64) -> Result<DyadicSystem> {
    let coords = space
        .line_coords()
        .ok_or_else(|| Error::param("shifted1d mode needs a space with 1D coordinates"))?
        .to_vec();
    let n = space.len();
    let extent = (coords[n - 1] - coords[0]).max(space.resolution());
    let k_min = params
        .k_min
        .unwrap_or_else(|| -(extent.log2().ceil() as i32).max(0));
    let k_max = match params.k_max {
        Some(k) => k,
        None if n == 1 => k_min,
        None => (1.0 / space.resolution()).log2().ceil() as i32,
    };
    if k_min > k_max {
        return Err(Error::param(format!("empty level range {k_min}..={k_max}")));
    }
    let top = k_max + SHIFT_GUARD_BITS;
    let s_fine = shift_at(seed, k_max, top);
    let scale = (k_max as f64).exp2();
    // lattice index at the finest level; coarser indices follow by exact
    // integer arithmetic so nesting never depends on rounding
    let mut idx: Vec<i64> = (0..n)
        .map(|x| ((space.coord(x, 0).unwrap() - s_fine) * scale).floor() as i64)
        .collect();
    let mut per_level: Vec<Vec<i64>> = vec![Vec::new(); (k_max - k_min + 1) as usize];
    per_level[(k_max - k_min) as usize] = idx.clone();
    for k in (k_min..k_max).rev() {
        let w = shift_bit(seed, k + 1) as i64;
        for t in idx.iter_mut() {
            *t = (*t - w).div_euclid(2);
        }
        per_level[(k - k_min) as usize] = idx.clone();
    }

    let mut cubes: Vec<Cube> = Vec::new();
    let mut levels = Vec::with_capacity(per_level.len());
    let mut point_cube = Vec::with_capacity(per_level.len());
    for (li, idx) in per_level.iter().enumerate() {
        let k = k_min + li as i32;
        let side = (-k as f64).exp2();
        let s_k = shift_at(seed, k, top);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&x| (idx[x], x));
        let mut ids = Vec::new();
        let mut map = vec![0u32; n];
        let mut start = 0;
        while start < n {
            let t = idx[order[start]];
            let mut end = start;
            while end < n && idx[order[end]] == t {
                end += 1;
            }
            let mut members: Vec<usize> = order[start..end].to_vec();
            members.sort_unstable();
            let lo = t as f64 * side + s_k;
            let mid = lo + side / 2.0;
            let center = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da = (space.coord(a, 0).unwrap() - mid).abs();
                    let db = (space.coord(b, 0).unwrap() - mid).abs();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            let id = cubes.len();
            for &x in &members {
                map[x] = id as u32;
            }
            cubes.push(Cube {
                id,
                level: k,
                alpha: ids.len(),
                center,
                anchor: Center::Coord(mid),
                members,
                parent: None,
                children: Vec::new(),
                side,
                interval: Some((lo, lo + side)),
            });
            ids.push(id);
            start = end;
        }
        levels.push(ids);
        point_cube.push(map);
    }
    link(&mut cubes, &levels, &point_cube);
    let nets = levels.iter().map(|l| {
        let mut c: Vec<usize> = l.iter().map(|&q| cubes[q].center).collect();
        c.sort_unstable();
        c
    });
    let nets = nets.collect();
    finish(
        space, params, seed, k_min, k_max, cubes, levels, point_cube, nets,
    )
}

fn build_generic(space: Arc<Space>, params: DyadicParams, seed: u64) -> Result<DyadicSystem> {
    let n = space.len();
    let delta = params.delta;
    let c0 = params.c0;
    let diam = space.diameter();
    let k_min = match params.k_min {
        Some(k) => k,
        None => {
            // coarsest level whose separation exceeds the diameter: one net point
            let mut k = 0;
            while c0 * delta.powi(k) <= diam {
                k -= 1;
            }
            while c0 * delta.powi(k + 1) > diam {
                k += 1;
            }
            k
        }
    };
    let k_max = match params.k_max {
        Some(k) => k,
        None => {
            let mut k = k_min;
            while n > 1 && c0 * delta.powi(k) > space.resolution() {
                k += 1;
            }
            k
        }
    };
    if k_min > k_max {
        return Err(Error::param(format!("empty level range {k_min}..={k_max}")));
    }
    let nlev = (k_max - k_min + 1) as usize;

    let mut r = rng::stream(seed, "net-order");
    let priority: Vec<u64> = (0..n).map(|_| r.random()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&x| (priority[x], x));

    // nested greedy nets, coarse to fine
    let mut in_net = vec![false; n];
    let mut nets: Vec<Vec<usize>> = Vec::with_capacity(nlev);
    for li in 0..nlev {
        let k = k_min + li as i32;
        let sep = c0 * delta.powi(k);
        for &x in &order {
            if in_net[x] {
                continue;
            }
            let (d, o) = space.neighbors_unchecked(x);
            let blocked = d
                .iter()
                .zip(o.iter())
                .take_while(|(dist, _)| **dist < sep)
                .any(|(_, &y)| in_net[y as usize]);
            if !blocked {
                in_net[x] = true;
            }
        }
        nets.push((0..n).filter(|&x| in_net[x]).collect());
    }
    if nets[0].is_empty() {
        return Err(Error::NoAdmissible("coarsest net is empty".into()));
    }

    // nearest member of a net, ties broken by priority
    let nearest = |x: usize, member: &[bool]| -> usize {
        let (d, o) = space.neighbors_unchecked(x);
        let mut best: Option<(f64, u64, usize)> = None;
        for (dist, &y) in d.iter().zip(o.iter()) {
            let y = y as usize;
            if let Some((bd, _, _)) = best {
                if *dist > bd {
                    break;
                }
            }
            if member[y] {
                let cand = (*dist, priority[y], y);
                best = Some(match best {
                    Some(b) if (b.1, b.2) <= (cand.1, cand.2) => b,
                    _ => cand,
                });
            }
        }
        best.expect("nonempty net").2
    };

    // owner[li][x]: the level reference point whose cube holds x
    let mut owner: Vec<Vec<usize>> = vec![Vec::new(); nlev];
    let mut member = vec![false; n];
    for &z in &nets[nlev - 1] {
        member[z] = true;
    }
    owner[nlev - 1] = (0..n).map(|x| nearest(x, &member)).collect();
    for li in (0..nlev - 1).rev() {
        let mut member = vec![false; n];
        for &z in &nets[li] {
            member[z] = true;
        }
        let parent_of: Vec<usize> = (0..n)
            .map(|z| {
                if in_fine(&nets[li + 1], z) {
                    nearest(z, &member)
                } else {
                    usize::MAX
                }
            })
            .collect();
        owner[li] = owner[li + 1].iter().map(|&z| parent_of[z]).collect();
    }

    let mut cubes = Vec::new();
    let mut levels = Vec::with_capacity(nlev);
    let mut point_cube = Vec::with_capacity(nlev);
    for li in 0..nlev {
        let k = k_min + li as i32;
        let side = delta.powi(k);
        let mut cube_of_ref = vec![u32::MAX; n];
        let mut ids = Vec::new();
        for &z in &nets[li] {
            let id = cubes.len();
            cube_of_ref[z] = id as u32;
            cubes.push(Cube {
                id,
                level: k,
                alpha: ids.len(),
                center: z,
                anchor: Center::Point(z),
                members: Vec::new(),
                parent: None,
                children: Vec::new(),
                side,
                interval: None,
            });
            ids.push(id);
        }
        let mut map = vec![0u32; n];
        for x in 0..n {
            let id = cube_of_ref[owner[li][x]];
            map[x] = id;
            cubes[id as usize].members.push(x);
        }
        levels.push(ids);
        point_cube.push(map);
    }
    // a net point that attracts no points cannot happen: it owns itself
    link(&mut cubes, &levels, &point_cube);
    finish(
        space, params, seed, k_min, k_max, cubes, levels, point_cube, nets,
    )
}

fn in_fine(net: &[usize], z: usize) -> bool {
    net.binary_search(&z).is_ok()
}

fn link(cubes: &mut [Cube], levels: &[Vec<usize>], point_cube: &[Vec<u32>]) {
    for li in 1..levels.len() {
        for &q in &levels[li] {
            let x = cubes[q].members[0];
            let p = point_cube[li - 1][x] as usize;
            cubes[q].parent = Some(p);
            cubes[p].children.push(q);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    space: Arc<Space>,
    params: DyadicParams,
    seed: u64,
    k_min: i32,
    k_max: i32,
    cubes: Vec<Cube>,
    levels: Vec<Vec<usize>>,
    point_cube: Vec<Vec<u32>>,
    nets: Vec<Vec<usize>>,
) -> Result<DyadicSystem> {
    let mut sys = DyadicSystem {
        space,
        params,
        seed,
        k_min,
        k_max,
        cubes,
        levels,
        point_cube,
        nets,
        c1: 0.0,
        big_c1: 0.0,
        dist_table: OnceLock::new(),
    };
    measure_ball_constants(&mut sys);
    Ok(sys)
}

fn measure_ball_constants(sys: &mut DyadicSystem) {
    let space = sys.space.clone();
    let n = space.len();
    let mut c1 = f64::INFINITY;
    let mut big_c1: f64 = 0.0;
    for cube in &sys.cubes {
        let z = cube.center;
        let mut inner = f64::INFINITY;
        let mut outer: f64 = 0.0;
        for y in 0..n {
            let d = space.d(z, y);
            if sys.point_cube[(cube.level - sys.k_min) as usize][y] as usize == cube.id {
                outer = outer.max(d);
            } else {
                inner = inner.min(d);
            }
        }
        c1 = c1.min(inner / cube.side);
        big_c1 = big_c1.max(outer / cube.side);
    }
    if !c1.is_finite() {
        // every cube is the whole space
        c1 = 1.0;
    }
    // members must sit strictly inside the outer ball
    big_c1 = big_c1 * (1.0 + 1e-9) + 1e-12;
    big_c1 = big_c1.max(c1);
    for _ in 0..200 {
        if outer_balls_monotone(sys, big_c1) {
            break;
        }
        big_c1 *= 1.25;
    }
    sys.c1 = c1;
    sys.big_c1 = big_c1;
}

fn outer_balls_monotone(sys: &DyadicSystem, big_c1: f64) -> bool {
    let space = &sys.space;
    let n = space.len();
    sys.cubes.iter().all(|cube| match cube.parent {
        None => true,
        Some(p) => {
            let parent = &sys.cubes[p];
            let (r, rp) = (big_c1 * cube.side, big_c1 * parent.side);
            (0..n).all(|y| space.d(cube.center, y) >= r || space.d(parent.center, y) < rp)
        }
    })
}

/// Monte Carlo estimate of `P(x lies in the tau delta^k boundary layer of some level-k cube)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurgeryEstimate {
    pub tau: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// Surgery probability for a single `tau`.
pub fn surgery_probability(
    space: &Arc<Space>,
    params: &DyadicParams,
    x: usize,
    level: i32,
    tau: f64,
    trials: usize,
    seed: u64,
) -> Result<SurgeryEstimate> {
    Ok(surgery_curve(space, params, x, level, &[tau], trials, seed)?[0])
}

/// Surgery probabilities for several `tau`, all evaluated on the same trials.
///
/// `x` lies in the layer of some level-`k` cube exactly when its distance
/// to the complement of its own cube is at most `tau delta^k`, so each trial
/// needs one distance.
pub fn surgery_curve(
    space: &Arc<Space>,
    params: &DyadicParams,
    x: usize,
    level: i32,
    taus: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SurgeryEstimate>> {
    if trials == 0 {
        return Err(Error::param("surgery needs at least one trial"));
    }
    if x >= space.len() {
        return Err(Error::UnknownPoint(x));
    }
    if let Some(t) = taus.iter().find(|t| !(**t >= 0.0 && **t <= 1.0)) {
        return Err(Error::param(format!("tau must lie in [0, 1], got {t}")));
    }
    params.validate(space.a0())?;
    let scale = params.delta.powi(level);
    let distances: Vec<f64> = match params.mode {
        Mode::Shifted1d => {
            let coords = space
                .line_coords()
                .ok_or_else(|| Error::param("shifted1d mode needs a space with 1D coordinates"))?;
            let xc = space.coord(x, 0).unwrap();
            (0..trials)
                .map(|i| {
                    let s = rng::derive_seed(seed, "surgery", i as u64) | 1;
                    let shift = shift_at(s, level, level + SHIFT_GUARD_BITS + 20);
                    let cell = |t: f64| ((t - shift) / scale).floor() as i64;
                    let own = cell(xc);
                    let first = coords.partition_point(|&t| cell(t) < own);
                    let past = coords.partition_point(|&t| cell(t) <= own);
                    let left = if first > 0 {
                        xc - coords[first - 1]
                    } else {
                        f64::INFINITY
                    };
                    let right = if past < coords.len() {
                        coords[past] - xc
                    } else {
                        f64::INFINITY
                    };
                    left.min(right)
                })
                .collect()
        }
        Mode::Generic => {
            let mut p = params.clone();
            p.k_max = Some(level);
            if p.k_min.is_none_or(|k| k > level) {
                p.k_min = None;
            }
            (0..trials)
                .map(|i| {
                    let s = rng::derive_seed(seed, "surgery", i as u64);
                    let sys = DyadicSystem::build(space.clone(), p.clone(), s)?;
                    let q = sys.cube_of(x, level).ok_or_else(|| {
                        Error::param(format!("level {level} is outside the system"))
                    })?;
                    Ok(sys.dist_to_complement(x, q))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(taus
        .iter()
        .map(|&tau| {
            let eps = tau * scale;
            let hits = distances.iter().filter(|&&d| d <= eps).count();
            let p = hits as f64 / trials as f64;
            SurgeryEstimate {
                tau,
                estimate: p,
                stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::BaseMeasure;

    fn line(n: usize) -> Arc<Space> {
        Arc::new(Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap())
    }

    #[test]
    fn unshifted_grid_is_the_binary_tree() {
        let s = line(16);
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        assert_eq!((sys.k_min(), sys.k_max()), (0, 4));
        assert_eq!(sys.roots().len(), 1);
        for k in 0..=4 {
            assert_eq!(sys.level(k).len(), 1 << k);
            for &q in sys.level(k) {
                let c = &sys.cubes()[q];
                let (lo, hi) = c.interval.unwrap();
                for &x in &c.members {
                    let t = s.coord(x, 0).unwrap();
                    assert!(t >= lo && t < hi);
                }
                assert_eq!(c.members.len(), 16 >> k);
            }
        }
        assert!(sys.validate().passed(), "{:?}", sys.validate());
    }

    #[test]
    fn shifted_systems_are_valid_and_seeded() {
        let s = line(256);
        let a = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 5).unwrap();
        let b = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 5).unwrap();
        let c = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 6).unwrap();
        assert_eq!(a.cubes(), b.cubes());
        assert!(a.validate().passed(), "{:?}", a.validate().failures);
        // level-4 boundaries as sets of interval endpoints
        let ends = |sys: &DyadicSystem| -> Vec<u64> {
            sys.level(4)
                .iter()
                .map(|&q| (sys.cubes()[q].interval.unwrap().0 * 1e9).round() as u64)
                .collect()
        };
        assert_ne!(ends(&a), ends(&c));
    }

    #[test]
    fn shift_bits_compose() {
        let seed = 99;
        let top = 30;
        for k in -2..10 {
            let lhs = shift_at(seed, k, top);
            let rhs = shift_at(seed, k + 1, top)
                + shift_bit(seed, k + 1) as f64 * (-(k + 1) as f64).exp2();
            assert!((lhs - rhs).abs() < 1e-15);
        }
        assert_eq!(shift_at(0, 0, 40), 0.0);
    }

    #[test]
    fn generic_nets_on_small_plane() {
        let s = Arc::new(Space::grid2d(64, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let sys = DyadicSystem::build(s.clone(), DyadicParams::generic(1.0 / 150.0), 3).unwrap();
        let v = sys.validate();
        assert!(v.passed(), "{:?}", v.failures);
        assert_eq!(sys.roots().len(), 1);
        // exhaustive oracle for the net properties at every level
        for k in sys.k_min()..=sys.k_max() {
            let net = sys.reference_points(k);
            let r = sys.delta().powi(k);
            for (i, &a) in net.iter().enumerate() {
                for &b in &net[i + 1..] {
                    assert!(s.d(a, b) >= r);
                }
            }
            for x in 0..64 {
                assert!(net.iter().any(|&z| s.d(x, z) < r));
            }
        }
    }

    #[test]
    fn generic_constraint_enforced() {
        let s = Arc::new(Space::tree(4, BaseMeasure::Lebesgue).unwrap());
        assert!(DyadicSystem::build(s.clone(), DyadicParams::generic(0.5), 1).is_err());
        let sys = DyadicSystem::build(s, DyadicParams::generic(0.5).relaxed(), 1).unwrap();
        assert!(sys.validate().passed(), "{:?}", sys.validate().failures);
    }

    #[test]
    fn single_point_space() {
        let s = Arc::new(Space::grid1d(1, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let sys =
            DyadicSystem::build(s.clone(), DyadicParams::shifted1d().with_levels(0, 3), 4).unwrap();
        for k in 0..=3 {
            assert_eq!(sys.level(k).len(), 1);
        }
        let g = DyadicSystem::build(s, DyadicParams::generic(0.05).with_levels(0, 2), 4).unwrap();
        assert!(g.validate().passed());
        for k in 0..=2 {
            assert_eq!(g.level(k).len(), 1);
        }
    }

    #[test]
    fn distances_to_cubes() {
        let s = line(64);
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        let q = sys.cube_of(0, 1).unwrap(); // [0, 0.5)
        let x = 48; // 0.7578125
        let oracle = sys.cubes()[q]
            .members
            .iter()
            .map(|&m| s.d(x, m))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(sys.dist_to_cube(x, q).unwrap(), oracle);
        assert!((oracle - 0.25).abs() <= 1.0 / 64.0);
        assert_eq!(sys.dist_to_cube(3, q).unwrap(), 0.0);
        for a in sys.level(3).iter().copied() {
            for b in sys.level(2).iter().copied() {
                let brute = sys.cubes()[a]
                    .members
                    .iter()
                    .flat_map(|&p| sys.cubes()[b].members.iter().map(move |&q| (p, q)))
                    .map(|(p, q)| s.d(p, q))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(sys.dist_cubes(a, b), brute);
            }
        }
    }

    #[test]
    fn boundary_layers() {
        let s = line(64);
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        let q = sys.cube_of(20, 2).unwrap(); // [0.25, 0.5)
        let thin = sys.boundary_layer(q, 0.5 / 64.0).unwrap();
        assert!(thin.is_empty());
        let one = sys.boundary_layer(q, 1.0 / 64.0).unwrap();
        assert_eq!(one, vec![15, 16, 31, 32]);
        let top = sys.roots()[0];
        assert!(sys.boundary_layer(top, 1.0).unwrap().is_empty());
        let wide = sys.boundary_layer(q, 2.0 * sys.big_c1() * 0.25).unwrap();
        assert!(wide.len() >= 32);
    }

    #[test]
    fn goodness_hand_example() {
        let s = line(256);
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        // [0.25, 0.3125) is the level-4 cube containing 0.26
        let q = sys.cube_of(66, 4).unwrap();
        assert_eq!(sys.cubes()[q].interval, Some((0.25, 0.3125)));
        let threshold = (1.0f64 / 16.0).powf(0.2) * 0.5f64.powf(0.8);
        assert!((threshold - 2f64.powf(-1.6)).abs() < 1e-15);
        let q1 = sys.cube_of(0, 1).unwrap();
        assert_eq!(sys.dist_cubes(q1, q), 0.0);
        assert!(sys.dist_cube_to_complement(q, q1) < threshold);
        assert!(!sys.is_good(q, &sys, 2, 0.2).unwrap());
        // nothing two levels coarser than a level-1 cube
        assert!(sys.is_good(q1, &sys, 2, 0.2).unwrap());
    }

    #[test]
    fn centered_cube_is_good() {
        let s = line(256);
        let sys = DyadicSystem::build(s.clone(), DyadicParams::shifted1d(), 0).unwrap();
        // with eps near 1 the threshold approaches l(q) and a cube in the
        // middle of its ancestors qualifies
        let q = sys.cube_of(85, 6).unwrap(); // [0.328125, 0.34375)
        let good = sys.is_good(q, &sys, 2, 0.9).unwrap();
        let oracle = (sys.k_min()..=sys.cubes()[q].level - 2).all(|k| {
            let q1 = sys.cube_of(85, k).unwrap();
            let t = sys.cubes()[q].side.powf(0.9) * sys.cubes()[q1].side.powf(0.1);
            sys.dist_cube_to_complement(q, q1) >= t
        });
        assert_eq!(good, oracle);
        assert!(good);
    }

    #[test]
    fn surgery_limits() {
        let s = line(1024);
        let p = DyadicParams::shifted1d();
        let x = 512;
        // at level 1 the cell holding x always has interior boundaries on both sides
        let est = surgery_curve(&s, &p, x, 1, &[0.0, 0.1, 1.0], 4000, 7).unwrap();
        assert_eq!(est[0].estimate, 0.0);
        assert!(
            (est[1].estimate - 0.2).abs() < 3.0 * est[1].stderr + 2.0 / 1024.0,
            "{:?}",
            est[1]
        );
        assert_eq!(est[2].estimate, 1.0);
    }
}
