//! Finite, atomic spaces of homogeneous type.
//!
//! A [`Space`] is a finite point set with a quasi-metric and a strictly
//! positive base measure. Balls are open, `B(x, r) = {y : d(x, y) < r}`,
//! and every ball query goes through a per-point sorted distance index built
//! once at construction (spaces larger than [`INDEX_LIMIT`] points fall back
//! to linear scans).

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Largest space for which the full sorted distance index is built.
pub const INDEX_LIMIT: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub index: usize,
    pub coords: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricKind {
    /// Euclidean distance between point coordinates.
    Euclidean,
    /// Leaves of a complete binary tree of the given depth; two leaves whose
    /// nearest common ancestor sits at depth `j` are `2^-j` apart.
    Tree { depth: u32 },
    /// Explicit symmetric distance matrix, row-major.
    Matrix(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuasiMetric {
    pub kind: MetricKind,
    /// Quasi-triangle constant `A0 >= 1`.
    pub a0: f64,
}

/// Nonnegative atoms over the points of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    atoms: Vec<f64>,
    total: f64,
}

impl Measure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if let Some((i, a)) = atoms
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a >= 0.0))
        {
            return Err(Error::param(format!(
                "atom {i} is {a}; atoms must be finite and nonnegative"
            )));
        }
        let total = atoms.iter().sum();
        Ok(Self { atoms, total })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            atoms: vec![0.0; n],
            total: 0.0,
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|&a| a == 0.0)
    }

    /// Mass of a point set.
    pub fn mass(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.atoms[i]).sum()
    }

    /// `1_E w` for a point set `E`.
    pub fn restrict(&self, set: &[usize]) -> Measure {
        let mut atoms = vec![0.0; self.atoms.len()];
        for &i in set {
            atoms[i] = self.atoms[i];
        }
        Measure::new(atoms).expect("restriction of a valid measure")
    }

    /// `w` with the atoms on `set` removed.
    pub fn remove(&self, set: &[usize]) -> Measure {
        let mut atoms = self.atoms.clone();
        for &i in set {
            atoms[i] = 0.0;
        }
        Measure::new(atoms).expect("restriction of a valid measure")
    }

    pub fn scaled(&self, s: f64) -> Measure {
        Measure::new(self.atoms.iter().map(|a| a * s).collect()).expect("nonnegative scale")
    }

    /// Indices where both measures carry mass.
    pub fn common_atoms(&self, other: &Measure) -> Vec<usize> {
        self.atoms
            .iter()
            .zip(&other.atoms)
            .enumerate()
            .filter(|(_, (a, b))| **a > 0.0 && **b > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Where a ball is centered: at a point of the space, or (1D spaces only) at
/// an arbitrary location on the line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Center {
    Point(usize),
    Coord(f64),
}

struct DistanceIndex {
    n: usize,
    dists: Vec<f64>,
    order: Vec<u32>,
    mu_prefix: Vec<f64>,
}

impl DistanceIndex {
    fn row(&self, x: usize) -> (&[f64], &[u32], &[f64]) {
        let n = self.n;
        (
            &self.dists[x * n..(x + 1) * n],
            &self.order[x * n..(x + 1) * n],
            &self.mu_prefix[x * (n + 1)..(x + 1) * (n + 1)],
        )
    }
}

/// Sorted coordinates of a 1D space with prefix sums of the base measure.
struct LineIndex {
    sorted: Vec<f64>,
    mu_prefix: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoublingEstimate {
    /// Largest observed `mu(B(x,2r)) / mu(B(x,r))`.
    pub c_mu: f64,
    /// Least-squares slope of `log(mu(B(x,mr)) / mu(B(x,r)))` against `log m`.
    pub n_est: f64,
    pub samples: usize,
}

/// Geometric range of radii `lo, ..., hi` with `count` samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleRange {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl ScaleRange {
    pub fn radii(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let ratio = (self.hi / self.lo).ln() / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| self.lo * (ratio * i as f64).exp())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuasiTriangleReport {
    /// max over checked triples of `d(x,y) / (d(x,z) + d(z,y))`.
    pub max_ratio: f64,
    pub triples: usize,
    pub violations: usize,
}

impl QuasiTriangleReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Base measure for grid spaces.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseMeasure {
    /// Cell volume at every point.
    Lebesgue,
    /// `t^{2 lambda} dt`, the Bessel measure on the half line.
    Bessel { lambda: f64 },
    /// Explicit atoms.
    Custom(Vec<f64>),
}

pub struct Space {
    points: Vec<Point>,
    metric: QuasiMetric,
    mu: Measure,
    n_dim: f64,
    c_mu: f64,
    diameter: f64,
    resolution: f64,
    index: Option<DistanceIndex>,
    line: Option<LineIndex>,
}

impl std::fmt::Debug for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Space")
            .field("n_points", &self.points.len())
            .field("metric", &self.metric.kind_name())
            .field("a0", &self.metric.a0)
            .field("n_dim", &self.n_dim)
            .field("c_mu", &self.c_mu)
            .field("diameter", &self.diameter)
            .field("resolution", &self.resolution)
            .finish()
    }
}

impl QuasiMetric {
    fn kind_name(&self) -> &'static str {
        match self.kind {
            MetricKind::Euclidean => "euclidean",
            MetricKind::Tree { .. } => "tree",
            MetricKind::Matrix(_) => "matrix",
        }
    }
}

impl Space {
    pub fn new(points: Vec<Point>, metric: QuasiMetric, mu: Measure, n_dim: f64) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::param("a space needs at least one point"));
        }
        if mu.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} atoms for {n} points",
                mu.len()
            )));
        }
        if let Some(i) = mu.atoms().iter().position(|&a| a <= 0.0) {
            return Err(Error::param(format!(
                "base measure must be strictly positive; atom {i} is not"
            )));
        }
        if metric.a0 < 1.0 || !metric.a0.is_finite() {
            return Err(Error::param(format!(
                "quasi-triangle constant must be >= 1, got {}",
                metric.a0
            )));
        }
        if !(n_dim > 0.0) {
            return Err(Error::param(format!(
                "upper dimension must be positive, got {n_dim}"
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if p.index != i {
                return Err(Error::param(format!(
                    "point at position {i} carries index {}",
                    p.index
                )));
            }
        }
        match &metric.kind {
            MetricKind::Euclidean => {
                let dim = points[0].coords.as_ref().map(Vec::len);
                if dim.is_none()
                    || points
                        .iter()
                        .any(|p| p.coords.as_ref().map(Vec::len) != dim)
                {
                    return Err(Error::param(
                        "euclidean metric needs coordinates of equal length on every point",
                    ));
                }
            }
            MetricKind::Tree { depth } => {
                if *depth >= 31 || n != 1usize << depth {
                    return Err(Error::param(format!(
                        "tree of depth {depth} needs 2^depth leaves, got {n}"
                    )));
                }
            }
            MetricKind::Matrix(m) => {
                if m.len() != n * n {
                    return Err(Error::DimensionMismatch(format!(
                        "distance matrix has {} entries for {n} points",
                        m.len()
                    )));
                }
                for i in 0..n {
                    if m[i * n + i] != 0.0 {
                        return Err(Error::param(format!(
                            "distance matrix diagonal entry {i} is nonzero"
                        )));
                    }
                    for j in 0..n {
                        let d = m[i * n + j];
                        if !(d.is_finite() && d >= 0.0) || d != m[j * n + i] || (i != j && d == 0.0)
                        {
                            return Err(Error::param(format!(
                                "distance matrix entry ({i},{j}) violates metric axioms"
                            )));
                        }
                    }
                }
            }
        }

        let mut space = Space {
            points,
            metric,
            mu,
            n_dim,
            c_mu: 1.0,
            diameter: 0.0,
            resolution: 0.0,
            index: None,
            line: None,
        };
        space.build_indexes();
        let lo = 2.0 * space.resolution;
        let hi = space.diameter / 4.0;
        if n > 1 && lo > 0.0 && lo <= hi {
            let est = space.estimate_doubling(&ScaleRange { lo, hi, count: 16 })?;
            space.c_mu = est.c_mu;
        }
        Ok(space)
    }

    fn build_indexes(&mut self) {
        let n = self.points.len();
        let mut diameter: f64 = 0.0;
        let mut resolution = f64::INFINITY;
        if n <= INDEX_LIMIT {
            let mut dists = Vec::with_capacity(n * n);
            let mut order = Vec::with_capacity(n * n);
            let mut mu_prefix = Vec::with_capacity(n * (n + 1));
            let mut row: Vec<(f64, u32)> = Vec::with_capacity(n);
            for x in 0..n {
                row.clear();
                row.extend((0..n).map(|y| (self.raw_dist(x, y), y as u32)));
                row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut acc = 0.0;
                mu_prefix.push(0.0);
                for &(d, y) in &row {
                    dists.push(d);
                    order.push(y);
                    acc += self.mu.atoms[y as usize];
                    mu_prefix.push(acc);
                }
                diameter = diameter.max(row[n - 1].0);
                if n > 1 {
                    resolution = resolution.min(row[1].0);
                }
            }
            self.index = Some(DistanceIndex {
                n,
                dists,
                order,
                mu_prefix,
            });
        } else if self.embedding_dim() == Some(1) {
            let mut t: Vec<f64> = self
                .points
                .iter()
                .map(|p| p.coords.as_ref().unwrap()[0])
                .collect();
            t.sort_by(f64::total_cmp);
            diameter = t[n - 1] - t[0];
            resolution = t
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min);
        } else {
            for x in 0..n {
                for y in x + 1..n {
                    let d = self.raw_dist(x, y);
                    diameter = diameter.max(d);
                    resolution = resolution.min(d);
                }
            }
        }
        self.diameter = diameter;
        self.resolution = if resolution.is_finite() {
            resolution
        } else {
            0.0
        };

        if self.embedding_dim() == Some(1) {
            let mut pairs: Vec<(f64, f64)> = self
                .points
                .iter()
                .map(|p| (p.coords.as_ref().unwrap()[0], self.mu.atoms[p.index]))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut mu_prefix = Vec::with_capacity(n + 1);
            mu_prefix.push(0.0);
            let mut acc = 0.0;
            for &(_, m) in &pairs {
                acc += m;
                mu_prefix.push(acc);
            }
            self.line = Some(LineIndex {
                sorted: pairs.iter().map(|p| p.0).collect(),
                mu_prefix,
            });
        }
    }

    /// `n` points at the cell midpoints of a uniform grid on `[a, b)`.
    pub fn grid1d(n: usize, domain: [f64; 2], base: BaseMeasure, a0: f64) -> Result<Self> {
        let [a, b] = domain;
        if n == 0 || !(b > a) {
            return Err(Error::param(format!(
                "grid1d needs n >= 1 and a < b, got n={n}, [{a}, {b})"
            )));
        }
        let h = (b - a) / n as f64;
        let coords: Vec<f64> = (0..n).map(|i| a + (i as f64 + 0.5) * h).collect();
        let atoms = base_atoms(&base, &coords, h, n)?;
        let points = coords
            .into_iter()
            .enumerate()
            .map(|(index, t)| Point {
                index,
                coords: Some(vec![t]),
            })
            .collect();
        Space::new(
            points,
            QuasiMetric {
                kind: MetricKind::Euclidean,
                a0,
            },
            Measure::new(atoms)?,
            1.0,
        )
    }

    /// `side x side` cell midpoints on `[a, b)^2`; `n_points` must be a square.
    pub fn grid2d(n_points: usize, domain: [f64; 2], base: BaseMeasure, a0: f64) -> Result<Self> {
        let side = (n_points as f64).sqrt().round() as usize;
        if side == 0 || side * side != n_points {
            return Err(Error::param(format!(
                "grid2d needs a square point count, got {n_points}"
            )));
        }
        let [a, b] = domain;
        if !(b > a) {
            return Err(Error::param("grid2d needs a < b"));
        }
        let h = (b - a) / side as f64;
        let mut points = Vec::with_capacity(n_points);
        for i in 0..side {
            for j in 0..side {
                let index = i * side + j;
                points.push(Point {
                    index,
                    coords: Some(vec![a + (i as f64 + 0.5) * h, a + (j as f64 + 0.5) * h]),
                });
            }
        }
        let atoms = match base {
            BaseMeasure::Lebesgue => vec![h * h; n_points],
            BaseMeasure::Custom(atoms) => atoms,
            BaseMeasure::Bessel { .. } => {
                return Err(Error::param("the Bessel measure is one-dimensional"))
            }
        };
        Space::new(
            points,
            QuasiMetric {
                kind: MetricKind::Euclidean,
                a0,
            },
            Measure::new(atoms)?,
            2.0,
        )
    }

    /// The `2^depth` leaves of a binary tree with the ultrametric `2^-j`.
    pub fn tree(depth: u32, base: BaseMeasure) -> Result<Self> {
        if depth >= 24 {
            return Err(Error::param(format!("tree depth {depth} is too large")));
        }
        let n = 1usize << depth;
        let h = 1.0 / n as f64;
        let atoms = match base {
            BaseMeasure::Lebesgue => vec![h; n],
            BaseMeasure::Custom(atoms) => atoms,
            BaseMeasure::Bessel { .. } => {
                return Err(Error::param("the Bessel measure needs a line"))
            }
        };
        let points = (0..n)
            .map(|index| Point {
                index,
                coords: None,
            })
            .collect();
        Space::new(
            points,
            QuasiMetric {
                kind: MetricKind::Tree { depth },
                a0: 1.0,
            },
            Measure::new(atoms)?,
            1.0,
        )
    }

    /// Explicit coordinates and atoms with the Euclidean metric.
    pub fn from_coords(
        coords: Vec<Vec<f64>>,
        atoms: Vec<f64>,
        n_dim: f64,
        a0: f64,
    ) -> Result<Self> {
        let points = coords
            .into_iter()
            .enumerate()
            .map(|(index, c)| Point {
                index,
                coords: Some(c),
            })
            .collect();
        Space::new(
            points,
            QuasiMetric {
                kind: MetricKind::Euclidean,
                a0,
            },
            Measure::new(atoms)?,
            n_dim,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn metric(&self) -> &QuasiMetric {
        &self.metric
    }

    pub fn a0(&self) -> f64 {
        self.metric.a0
    }

    pub fn mu(&self) -> &Measure {
        &self.mu
    }

    pub fn n_dim(&self) -> f64 {
        self.n_dim
    }

    /// Doubling constant measured at construction over `[2 resolution, diameter / 4]`.
    pub fn c_mu(&self) -> f64 {
        self.c_mu
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Smallest nonzero distance.
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Length of the coordinate vectors, if every point has one.
    pub fn embedding_dim(&self) -> Option<usize> {
        let d = self.points.first()?.coords.as_ref()?.len();
        self.points
            .iter()
            .all(|p| p.coords.as_ref().map(Vec::len) == Some(d))
            .then_some(d)
    }

    /// Sorted coordinates of a 1D space.
    pub fn line_coords(&self) -> Option<&[f64]> {
        self.line.as_ref().map(|l| l.sorted.as_slice())
    }

    pub fn coord(&self, x: usize, axis: usize) -> Option<f64> {
        self.points.get(x)?.coords.as_ref()?.get(axis).copied()
    }

    fn check(&self, x: usize) -> Result<()> {
        if x < self.points.len() {
            Ok(())
        } else {
            Err(Error::UnknownPoint(x))
        }
    }

    fn raw_dist(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        match &self.metric.kind {
            MetricKind::Euclidean => {
                let a = self.points[x].coords.as_ref().unwrap();
                let b = self.points[y].coords.as_ref().unwrap();
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            }
            MetricKind::Tree { depth } => {
                let bits = usize::BITS - (x ^ y).leading_zeros();
                let ancestor_depth = *depth as i32 - bits as i32;
                (-ancestor_depth as f64).exp2()
            }
            MetricKind::Matrix(m) => m[x * self.points.len() + y],
        }
    }

    pub fn dist(&self, x: usize, y: usize) -> Result<f64> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.raw_dist(x, y))
    }

    /// Unchecked distance for hot loops inside the crate.
    pub(crate) fn d(&self, x: usize, y: usize) -> f64 {
        self.raw_dist(x, y)
    }

    /// Points ordered by distance from `x` (ties by index), with distances.
    pub fn neighbors_sorted(&self, x: usize) -> Result<(Cow<'_, [f64]>, Cow<'_, [u32]>)> {
        self.check(x)?;
        Ok(self.neighbors_unchecked(x))
    }

    pub(crate) fn neighbors_unchecked(&self, x: usize) -> (Cow<'_, [f64]>, Cow<'_, [u32]>) {
        match &self.index {
            Some(idx) => {
                let (d, o, _) = idx.row(x);
                (Cow::Borrowed(d), Cow::Borrowed(o))
            }
            None => {
                let mut row: Vec<(f64, u32)> = (0..self.len())
                    .map(|y| (self.raw_dist(x, y), y as u32))
                    .collect();
                row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                (
                    Cow::Owned(row.iter().map(|r| r.0).collect()),
                    Cow::Owned(row.iter().map(|r| r.1).collect()),
                )
            }
        }
    }

    /// `w(B(x, r))` with the open ball `{y : d(x,y) < r}`.
    pub fn ball_measure(&self, x: usize, r: f64, w: &Measure) -> Result<f64> {
        self.check(x)?;
        if !(r >= 0.0) {
            return Err(Error::NegativeRadius(r));
        }
        if w.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "measure of length {} on {} points",
                w.len(),
                self.len()
            )));
        }
        Ok(match &self.index {
            Some(idx) => {
                let (d, o, _) = idx.row(x);
                let count = d.partition_point(|&t| t < r);
                o[..count].iter().map(|&y| w.atoms[y as usize]).sum()
            }
            None => (0..self.len())
                .filter(|&y| self.raw_dist(x, y) < r)
                .map(|y| w.atoms[y])
                .sum(),
        })
    }

    /// `mu(B(x, r))` for the base measure.
    pub fn ball_mu(&self, x: usize, r: f64) -> Result<f64> {
        self.check(x)?;
        if !(r >= 0.0) {
            return Err(Error::NegativeRadius(r));
        }
        Ok(self.ball_mu_unchecked(x, r))
    }

    pub(crate) fn ball_mu_unchecked(&self, x: usize, r: f64) -> f64 {
        match &self.index {
            Some(idx) => {
                let (d, _, p) = idx.row(x);
                p[d.partition_point(|&t| t < r)]
            }
            None => match (&self.line, self.metric.kind == MetricKind::Euclidean) {
                (Some(line), true) => {
                    line_ball(line, self.points[x].coords.as_ref().unwrap()[0], r)
                }
                _ => (0..self.len())
                    .filter(|&y| self.raw_dist(x, y) < r)
                    .map(|y| self.mu.atoms[y])
                    .sum(),
            },
        }
    }

    /// `mu(B(c, r))` for a point center or, on 1D spaces, any location.
    pub fn ball_mu_at(&self, center: Center, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::NegativeRadius(r));
        }
        match center {
            Center::Point(x) => self.ball_mu(x, r),
            Center::Coord(c) => {
                let line = self
                    .line
                    .as_ref()
                    .ok_or_else(|| Error::param("coordinate-centered balls need a 1D space"))?;
                Ok(line_ball(line, c, r))
            }
        }
    }

    pub(crate) fn ball_mu_at_unchecked(&self, center: Center, r: f64) -> f64 {
        match center {
            Center::Point(x) => self.ball_mu_unchecked(x, r),
            Center::Coord(c) => line_ball(self.line.as_ref().expect("1D space"), c, r),
        }
    }

    /// `V(x, y) = mu(B(x, d(x, y)))`.
    pub fn volume(&self, x: usize, y: usize) -> Result<f64> {
        self.check(x)?;
        self.check(y)?;
        if x == y {
            return Err(Error::Diagonal(x));
        }
        Ok(self.ball_mu_unchecked(x, self.raw_dist(x, y)))
    }

    pub(crate) fn volume_unchecked(&self, x: usize, y: usize) -> f64 {
        self.ball_mu_unchecked(x, self.raw_dist(x, y))
    }

    /// Doubling constant and upper dimension measured over every point as a
    /// center and the radii of `scales`.
    pub fn estimate_doubling(&self, scales: &ScaleRange) -> Result<DoublingEstimate> {
        let centers: Vec<usize> = (0..self.len()).collect();
        self.estimate_doubling_at(&centers, scales)
    }

    /// As [`Space::estimate_doubling`] restricted to the given centers.
    pub fn estimate_doubling_at(
        &self,
        centers: &[usize],
        scales: &ScaleRange,
    ) -> Result<DoublingEstimate> {
        if scales.count == 0
            || !(scales.lo > 0.0)
            || !(scales.hi >= scales.lo)
            || centers.is_empty()
        {
            return Err(Error::param(format!(
                "empty scale range [{}, {}] x {} over {} centers",
                scales.lo,
                scales.hi,
                scales.count,
                centers.len()
            )));
        }
        for &x in centers {
            self.check(x)?;
        }
        const MULTIPLIERS: [f64; 4] = [1.5, 2.0, 3.0, 4.0];
        let radii = scales.radii();
        let mut c_mu: f64 = 1.0;
        let (mut sx, mut sy, mut sxx, mut sxy, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for &x in centers {
            for &r in &radii {
                let base = self.ball_mu_unchecked(x, r);
                c_mu = c_mu.max(self.ball_mu_unchecked(x, 2.0 * r) / base);
                for m in MULTIPLIERS {
                    let lx = m.ln();
                    let ly = (self.ball_mu_unchecked(x, m * r) / base).ln();
                    sx += lx;
                    sy += ly;
                    sxx += lx * lx;
                    sxy += lx * ly;
                    count += 1;
                }
            }
        }
        let nf = count as f64;
        let n_est = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
        Ok(DoublingEstimate {
            c_mu,
            n_est,
            samples: count,
        })
    }

    /// Checks `d(x,y) <= A0 (d(x,z) + d(z,y))`, exhaustively when there are
    /// at most `max_triples` ordered triples, on a seeded sample otherwise.
    pub fn validate_quasi_triangle(&self, max_triples: usize, seed: u64) -> QuasiTriangleReport {
        let n = self.len();
        let mut report = QuasiTriangleReport {
            max_ratio: 0.0,
            triples: 0,
            violations: 0,
        };
        let visit = |x: usize, y: usize, z: usize, report: &mut QuasiTriangleReport| {
            if x == y {
                return;
            }
            let lhs = self.raw_dist(x, y);
            let rhs = self.raw_dist(x, z) + self.raw_dist(z, y);
            let ratio = lhs / rhs;
            report.triples += 1;
            report.max_ratio = report.max_ratio.max(ratio);
            if lhs > self.metric.a0 * rhs * (1.0 + 1e-12) {
                report.violations += 1;
            }
        };
        if n.saturating_pow(3) <= max_triples {
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        visit(x, y, z, &mut report);
                    }
                }
            }
        } else {
            let mut r = rng::stream(seed, "quasi-triangle");
            for _ in 0..max_triples {
                let (x, y, z) = (
                    r.random_range(0..n),
                    r.random_range(0..n),
                    r.random_range(0..n),
                );
                visit(x, y, z, &mut report);
            }
        }
        report
    }
}

fn line_ball(line: &LineIndex, c: f64, r: f64) -> f64 {
    let lo = line.sorted.partition_point(|&t| t <= c - r);
    let hi = line.sorted.partition_point(|&t| t < c + r);
    if hi <= lo {
        return 0.0;
    }
    // strict inequality on both sides: |t - c| < r
    let mut lo = lo;
    while lo < hi && (line.sorted[lo] - c).abs() >= r {
        lo += 1;
    }
    let mut hi = hi;
    while hi > lo && (line.sorted[hi - 1] - c).abs() >= r {
        hi -= 1;
    }
    line.mu_prefix[hi] - line.mu_prefix[lo]
}

fn base_atoms(base: &BaseMeasure, coords: &[f64], h: f64, n: usize) -> Result<Vec<f64>> {
    Ok(match base {
        BaseMeasure::Lebesgue => vec![h; n],
        BaseMeasure::Bessel { lambda } => {
            if coords.iter().any(|&t| t <= 0.0) {
                return Err(Error::param(
                    "the Bessel measure lives on the positive half line",
                ));
            }
            coords.iter().map(|t| t.powf(2.0 * lambda) * h).collect()
        }
        BaseMeasure::Custom(atoms) => atoms.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lebesgue(n: usize) -> Space {
        Space::grid1d(n, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap()
    }

    #[test]
    fn distance_axioms_and_errors() {
        let s = Space::grid1d(2, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap();
        assert_eq!(s.dist(0, 0).unwrap(), 0.0);
        assert_eq!(s.dist(0, 1).unwrap(), 0.5);
        assert_eq!(s.dist(1, 0).unwrap(), 0.5);
        assert!(matches!(s.dist(0, 2), Err(Error::UnknownPoint(2))));
    }

    #[test]
    fn tree_distance_matches_ancestor_walk() {
        let depth = 5;
        let s = Space::tree(depth, BaseMeasure::Lebesgue).unwrap();
        for x in 0..32usize {
            for y in 0..32usize {
                if x == y {
                    continue;
                }
                // walk both leaves up until they meet
                let (mut a, mut b, mut level) = (x, y, depth as i32);
                while a != b {
                    a >>= 1;
                    b >>= 1;
                    level -= 1;
                }
                assert_eq!(s.dist(x, y).unwrap(), (-level as f64).exp2());
            }
        }
    }

    #[test]
    fn ball_is_open_and_monotone() {
        let s = lebesgue(256);
        let mu = s.mu().clone();
        assert_eq!(s.ball_measure(10, 0.0, &mu).unwrap(), 0.0);
        assert!(matches!(
            s.ball_measure(10, -1.0, &mu),
            Err(Error::NegativeRadius(_))
        ));
        assert_eq!(s.ball_measure(3, 2.0, &mu).unwrap(), mu.total());
        let mut last = 0.0;
        for k in 0..400 {
            let r = k as f64 / 300.0;
            let m = s.ball_measure(100, r, &mu).unwrap();
            assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn ball_around_midpoint_by_count() {
        let s = lebesgue(256);
        let x = 128; // coordinate 0.501953125
        let t = s.coord(x, 0).unwrap();
        let oracle = (0..256)
            .filter(|&i| ((i as f64 + 0.5) / 256.0 - t).abs() < 0.25)
            .count() as f64
            / 256.0;
        assert_eq!(oracle, 127.0 / 256.0);
        assert_eq!(s.ball_mu(x, 0.25).unwrap(), oracle);
        assert_eq!(s.ball_mu_at(Center::Point(x), 0.25).unwrap(), oracle);
    }

    #[test]
    fn coordinate_centered_balls_agree_with_scan() {
        let s = lebesgue(64);
        for &(c, r) in &[
            (0.5, 0.25),
            (0.0, 0.1),
            (0.3, 0.03125),
            (0.999, 2.0),
            (0.5, 0.0),
        ] {
            let scan: f64 = (0..64)
                .filter(|&i| (s.coord(i, 0).unwrap() - c).abs() < r)
                .map(|i| s.mu().atoms()[i])
                .sum();
            assert!((s.ball_mu_at(Center::Coord(c), r).unwrap() - scan).abs() < 1e-15);
        }
        // 2m points inside a radius m*h ball centered on a cell boundary
        assert!(
            (s.ball_mu_at(Center::Coord(0.5), 5.0 / 64.0).unwrap() - 10.0 / 64.0).abs() < 1e-15
        );
    }

    #[test]
    fn volume_of_interior_pair() {
        let s = Space::grid1d(512, [0.0, 2.0], BaseMeasure::Lebesgue, 1.0).unwrap();
        let (x, y) = (256, 384); // 1.0009765625 and 1.5009765625
        let d = s.dist(x, y).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let oracle: f64 = (0..512)
            .filter(|&i| (s.coord(i, 0).unwrap() - s.coord(x, 0).unwrap()).abs() < d)
            .map(|i| s.mu().atoms()[i])
            .sum();
        assert_eq!(s.volume(x, y).unwrap(), oracle);
        assert!((oracle - 1.0).abs() < 0.01);
        assert!(matches!(s.volume(4, 4), Err(Error::Diagonal(4))));
    }

    #[test]
    fn bessel_volume_by_quadrature() {
        let n = 400;
        let s = Space::grid1d(n, [0.0, 4.0], BaseMeasure::Bessel { lambda: 1.0 }, 1.0).unwrap();
        let h = 4.0 / n as f64;
        let x = (0..n)
            .find(|&i| (s.coord(i, 0).unwrap() - (1.0 + h / 2.0)).abs() < 1e-12)
            .unwrap();
        let y = x + 100; // distance 1
        let d = s.dist(x, y).unwrap();
        let tx = s.coord(x, 0).unwrap();
        let direct: f64 = (0..n)
            .map(|i| s.coord(i, 0).unwrap())
            .filter(|t| (t - tx).abs() < d)
            .map(|t| t * t * h)
            .sum();
        assert!((s.volume(x, y).unwrap() - direct).abs() < 1e-12);
        // the ball picks up whole coarse cells; integrate t^2 over those same
        // cells at double resolution
        let inside: Vec<f64> = (0..n)
            .map(|i| s.coord(i, 0).unwrap())
            .filter(|t| (t - tx).abs() < d)
            .collect();
        let (lo, hi) = (inside[0] - h / 2.0, inside[inside.len() - 1] + h / 2.0);
        let fine: f64 = (0..2 * n)
            .map(|i| (i as f64 + 0.5) * h / 2.0)
            .filter(|&t| t > lo && t < hi)
            .map(|t| t * t * h / 2.0)
            .sum();
        assert!((direct - fine).abs() / fine < 1e-4, "{direct} vs {fine}");
        assert!((lo - 0.01).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_on_lines_and_planes() {
        let s = lebesgue(1024);
        let h = s.resolution();
        let interior: Vec<usize> = (384..640).collect();
        let est = s
            .estimate_doubling_at(
                &interior,
                &ScaleRange {
                    lo: 8.0 * h,
                    hi: 0.1,
                    count: 24,
                },
            )
            .unwrap();
        assert!((est.c_mu - 2.0).abs() <= 0.1, "{est:?}");
        assert!((est.n_est - 1.0).abs() < 0.05, "{est:?}");

        let p = Space::grid2d(64 * 64, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap();
        let h = p.resolution();
        let centers: Vec<usize> = (24..40)
            .flat_map(|i| (24..40).map(move |j| i * 64 + j))
            .collect();
        let est = p
            .estimate_doubling_at(
                &centers,
                &ScaleRange {
                    lo: 4.0 * h,
                    hi: 0.08,
                    count: 10,
                },
            )
            .unwrap();
        assert!((est.n_est - 2.0).abs() < 0.15, "{est:?}");
    }

    #[test]
    fn doubling_single_point_and_empty_range() {
        let s = Space::grid1d(1, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap();
        let est = s
            .estimate_doubling(&ScaleRange {
                lo: 0.1,
                hi: 1.0,
                count: 4,
            })
            .unwrap();
        assert_eq!(est.c_mu, 1.0);
        assert!(s
            .estimate_doubling(&ScaleRange {
                lo: 0.1,
                hi: 1.0,
                count: 0
            })
            .is_err());
        assert!(s
            .estimate_doubling(&ScaleRange {
                lo: 1.0,
                hi: 0.1,
                count: 3
            })
            .is_err());
    }

    #[test]
    fn quasi_triangle_validation() {
        let s = lebesgue(12);
        assert!(s.validate_quasi_triangle(10_000, 1).passed());
        // squared euclidean distance is a quasi-metric with A0 = 2, not 1
        let n = 12;
        let m: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                ((i as f64 - j as f64) / n as f64).powi(2)
            })
            .collect();
        let pts: Vec<Point> = (0..n)
            .map(|index| Point {
                index,
                coords: None,
            })
            .collect();
        let mk = |a0| {
            Space::new(
                pts.clone(),
                QuasiMetric {
                    kind: MetricKind::Matrix(m.clone()),
                    a0,
                },
                Measure::new(vec![1.0; n]).unwrap(),
                1.0,
            )
            .unwrap()
        };
        assert!(!mk(1.0).validate_quasi_triangle(10_000, 1).passed());
        assert!(mk(2.0).validate_quasi_triangle(10_000, 1).passed());
    }

    #[test]
    fn rejects_bad_base_measure() {
        assert!(Space::grid1d(
            4,
            [0.0, 1.0],
            BaseMeasure::Custom(vec![1.0, 0.0, 1.0, 1.0]),
            1.0
        )
        .is_err());
        assert!(Space::grid1d(4, [-1.0, 1.0], BaseMeasure::Bessel { lambda: 1.0 }, 1.0).is_err());
    }
}
