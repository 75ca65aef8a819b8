//! Calderón-Zygmund kernels discretized on a finite space.
//!
//! The operator `f -> T(f u)` becomes a dense matrix with entries
//! `K(x_i, x_j)` off the diagonal and zeros on it; excluding the diagonal is
//! the only truncation applied.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::space::{Measure, Space};

/// Largest space a dense operator matrix is assembled for.
pub const MAX_POINTS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    /// `1 / (x - y)` on a line.
    Hilbert1d,
    /// `(x_d - y_d) / |x - y|^(dim + 1)`, the `d`-th Riesz component.
    Riesz { d: usize },
    /// `1 / V(x, y)`, optionally multiplied by the sign pattern `s_i s_j`
    /// with `s_i = (-1)^i`.
    Power {
        #[serde(default)]
        alternating: bool,
    },
    /// The zero kernel.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    #[serde(flatten)]
    pub kind: KernelKind,
    /// Smoothness exponent.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    1.0
}

impl Kernel {
    pub fn new(kind: KernelKind, kappa: f64) -> Self {
        Self { kind, kappa }
    }

    pub fn hilbert() -> Self {
        Self::new(KernelKind::Hilbert1d, 1.0)
    }

    pub fn is_antisymmetric(&self) -> bool {
        matches!(self.kind, KernelKind::Hilbert1d | KernelKind::Riesz { .. })
    }
}

/// Measured kernel constants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KernelValidation {
    /// max over pairs of `|K(x,y)| V(x,y)`.
    pub size_constant: f64,
    /// max over admissible triples of
    /// `|K(x,y) - K(x',y)| V(x,y) (d(x,y) / d(x,x'))^kappa`.
    pub smoothness_constant: f64,
    pub pairs: usize,
    pub triples: usize,
}

#[derive(Clone)]
pub struct OperatorMatrix {
    n: usize,
    entries: Vec<f64>,
    kernel: Kernel,
    space: Arc<Space>,
}

impl std::fmt::Debug for OperatorMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorMatrix")
            .field("n", &self.n)
            .field("kernel", &self.kernel)
            .finish()
    }
}

impl OperatorMatrix {
    pub fn assemble(space: Arc<Space>, kernel: Kernel) -> Result<Self> {
        let n = space.len();
        if n > MAX_POINTS {
            return Err(Error::param(format!(
                "dense operators are capped at {MAX_POINTS} points, got {n}"
            )));
        }
        if !(kernel.kappa > 0.0 && kernel.kappa <= 1.0) {
            return Err(Error::param(format!(
                "kappa must lie in (0, 1], got {}",
                kernel.kappa
            )));
        }
        let dim = space.embedding_dim();
        match kernel.kind {
            KernelKind::Hilbert1d if dim != Some(1) => {
                return Err(Error::DimensionMismatch(
                    "the Hilbert kernel needs 1D coordinates".into(),
                ));
            }
            KernelKind::Riesz { d } if dim.is_none_or(|m| d >= m) => {
                return Err(Error::DimensionMismatch(format!(
                    "Riesz component {d} on a space of coordinate dimension {dim:?}"
                )));
            }
            _ => {}
        }
        let mut entries = vec![0.0; n * n];
        entries.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, slot) in row.iter_mut().enumerate() {
                if i != j {
                    *slot = eval(&space, &kernel.kind, i, j);
                }
            }
        });
        Ok(Self {
            n,
            entries,
            kernel,
            space,
        })
    }

    /// A matrix given entry by entry (row-major); the diagonal is cleared.
    pub fn from_entries(space: Arc<Space>, mut entries: Vec<f64>) -> Result<Self> {
        let n = space.len();
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for {n} points",
                entries.len()
            )));
        }
        for i in 0..n {
            entries[i * n + i] = 0.0;
        }
        Ok(Self {
            n,
            entries,
            kernel: Kernel::new(KernelKind::Zero, 1.0),
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn space(&self) -> &Arc<Space> {
        &self.space
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = self.entries[i * n + j];
            }
        }
        Self {
            n,
            entries: t,
            kernel: self.kernel.clone(),
            space: self.space.clone(),
        }
    }

    fn check(&self, f: &[f64], u: &Measure) -> Result<()> {
        if f.len() != self.n || u.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "operator on {} points applied to vectors of length {} and {}",
                self.n,
                f.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// `T(f u)(x_i) = sum_{j != i} K(x_i, x_j) f(x_j) u_j`.
    pub fn apply_forward(&self, f: &[f64], u: &Measure) -> Result<Vec<f64>> {
        self.check(f, u)?;
        let fu: Vec<f64> = f.iter().zip(u.atoms()).map(|(a, b)| a * b).collect();
        Ok(self
            .entries
            .chunks(self.n)
            .map(|row| row.iter().zip(&fu).map(|(k, g)| k * g).sum())
            .collect())
    }

    /// `T*(g v)(x_j) = sum_{i != j} K(x_i, x_j) g(x_i) v_i`.
    pub fn apply_adjoint(&self, g: &[f64], v: &Measure) -> Result<Vec<f64>> {
        self.check(g, v)?;
        let mut out = vec![0.0; self.n];
        for (i, row) in self.entries.chunks(self.n).enumerate() {
            let gv = g[i] * v.atoms()[i];
            if gv != 0.0 {
                for (o, k) in out.iter_mut().zip(row) {
                    *o += k * gv;
                }
            }
        }
        Ok(out)
    }

    /// Measured size and smoothness constants. Pairs are exhaustive; triples
    /// are exhaustive up to `max_triples` and sampled beyond.
    pub fn validate(&self, max_triples: usize, seed: u64) -> KernelValidation {
        self.validate_on(None, max_triples, seed)
    }

    /// As [`OperatorMatrix::validate`], with `x` (and `y` in the pair sweep)
    /// restricted to `centers`.
    pub fn validate_on(
        &self,
        centers: Option<&[usize]>,
        max_triples: usize,
        seed: u64,
    ) -> KernelValidation {
        let s = &self.space;
        let n = self.n;
        let all: Vec<usize> = (0..n).collect();
        let xs = centers.unwrap_or(&all);
        let mut out = KernelValidation::default();
        for &x in xs {
            for &y in xs {
                if x != y {
                    out.size_constant = out
                        .size_constant
                        .max(self.entry(x, y).abs() * s.volume_unchecked(x, y));
                    out.pairs += 1;
                }
            }
        }
        let a0 = s.a0();
        let kappa = self.kernel.kappa;
        let mut visit = |x: usize, xp: usize, y: usize| {
            if x == y || xp == y || x == xp {
                return;
            }
            let dxy = s.d(x, y);
            let dxx = s.d(x, xp);
            if dxx > dxy / (2.0 * a0) {
                return;
            }
            let diff = (self.entry(x, y) - self.entry(xp, y)).abs();
            let q = diff * s.volume_unchecked(x, y) * (dxy / dxx).powf(kappa);
            out.smoothness_constant = out.smoothness_constant.max(q);
            out.triples += 1;
        };
        let m = xs.len();
        if m.saturating_pow(3) <= max_triples {
            for &x in xs {
                for &xp in xs {
                    for y in 0..n {
                        visit(x, xp, y);
                    }
                }
            }
        } else {
            let mut r = rng::stream(seed, "kernel-triples");
            for _ in 0..max_triples {
                let x = xs[r.random_range(0..m)];
                let xp = xs[r.random_range(0..m)];
                visit(x, xp, r.random_range(0..n));
            }
        }
        out
    }
}

fn eval(space: &Space, kind: &KernelKind, i: usize, j: usize) -> f64 {
    match kind {
        KernelKind::Hilbert1d => 1.0 / (space.coord(i, 0).unwrap() - space.coord(j, 0).unwrap()),
        KernelKind::Riesz { d } => {
            let dim = space.embedding_dim().unwrap() as i32;
            let r = space.d(i, j);
            (space.coord(i, *d).unwrap() - space.coord(j, *d).unwrap()) / r.powi(dim + 1)
        }
        KernelKind::Power { alternating } => {
            let sign = if *alternating && (i + j) % 2 == 1 {
                -1.0
            } else {
                1.0
            };
            sign / space.volume_unchecked(i, j)
        }
        KernelKind::Zero => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::BaseMeasure;

    fn two_points() -> Arc<Space> {
        Arc::new(
            Space::from_coords(vec![vec![0.25], vec![0.75]], vec![1.0, 1.0], 1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn hilbert_two_points() {
        let m = OperatorMatrix::assemble(two_points(), Kernel::hilbert()).unwrap();
        assert_eq!(m.entry(0, 1), -2.0);
        assert_eq!(m.entry(1, 0), 2.0);
        assert_eq!(m.entry(0, 0), 0.0);
        let u = Measure::new(vec![1.0, 4.0]).unwrap();
        assert_eq!(m.apply_forward(&[0.0, 1.0], &u).unwrap(), vec![-8.0, 0.0]);
        assert_eq!(m.apply_forward(&[0.0, 0.0], &u).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn riesz_rejects_wrong_dimension() {
        let s = Arc::new(Space::grid1d(8, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        assert!(matches!(
            OperatorMatrix::assemble(s, Kernel::new(KernelKind::Riesz { d: 1 }, 1.0)),
            Err(Error::DimensionMismatch(_))
        ));
        let t = Arc::new(Space::tree(3, BaseMeasure::Lebesgue).unwrap());
        assert!(OperatorMatrix::assemble(t, Kernel::hilbert()).is_err());
    }

    #[test]
    fn antisymmetry_and_adjoint() {
        let s = Arc::new(Space::grid2d(64, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let m = OperatorMatrix::assemble(s.clone(), Kernel::new(KernelKind::Riesz { d: 0 }, 1.0))
            .unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(m.entry(i, j), -m.entry(j, i));
            }
        }
        let mut r = rng::stream(4, "adjoint");
        let f: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let u = Measure::new((0..64).map(|_| r.random_range(0.1..2.0)).collect()).unwrap();
        let v = Measure::new((0..64).map(|_| r.random_range(0.1..2.0)).collect()).unwrap();
        let tf = m.apply_forward(&f, &u).unwrap();
        let tg = m.apply_adjoint(&g, &v).unwrap();
        let lhs: f64 = (0..64).map(|i| tf[i] * g[i] * v.atoms()[i]).sum();
        let rhs: f64 = (0..64).map(|j| f[j] * tg[j] * u.atoms()[j]).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn hilbert_size_constant_near_two() {
        let s = Arc::new(Space::grid1d(256, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let m = OperatorMatrix::assemble(s.clone(), Kernel::hilbert()).unwrap();
        let interior: Vec<usize> = (96..160).collect();
        let v = m.validate_on(Some(&interior), 100_000, 1);
        // |1/(x-y)| V(x,y) = 2 |x-y| / |x-y| up to one cell: (2m - 1) / m for m cells apart
        let oracle = interior
            .iter()
            .flat_map(|&x| interior.iter().map(move |&y| (x, y)))
            .filter(|(x, y)| x != y)
            .map(|(x, y)| (m.entry(x, y) * s.volume(x, y).unwrap()).abs())
            .fold(0.0, f64::max);
        assert_eq!(v.size_constant, oracle);
        assert!((1.5..=2.5).contains(&v.size_constant), "{v:?}");
        assert!(v.smoothness_constant.is_finite() && v.smoothness_constant > 0.0);
    }

    #[test]
    fn alternating_power_kernel_is_smooth() {
        let s = Arc::new(Space::grid1d(64, [0.0, 1.0], BaseMeasure::Lebesgue, 1.0).unwrap());
        let m =
            OperatorMatrix::assemble(s, Kernel::new(KernelKind::Power { alternating: true }, 1.0))
                .unwrap();
        let v = m.validate(1 << 20, 2);
        assert!(v.size_constant <= 1.0 + 1e-12);
        assert!(v.smoothness_constant.is_finite());
        assert!(v.triples > 0);
    }
}
