//! Haar bases adapted to a weight on a dyadic system.
//!
//! Each cube `Q` carries `M - 1` cancellative functions, where `M` counts
//! the children of positive weight. They are produced by Gram-Schmidt on the
//! child indicators after the constant function, in child order, and are
//! stored as one value per child.

use crate::dyadic::DyadicSystem;
use crate::error::{Error, Result};
use crate::space::Measure;

/// Children lighter than this fraction of their parent are treated as null.
const NULL_CHILD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HaarFunction {
    pub cube: usize,
    /// `1..M_Q - 1`; the non-cancellative function is not stored.
    pub eps: usize,
    /// One value per child of the cube, in the cube's child order.
    pub values: Vec<f64>,
}

pub struct HaarBasis<'a> {
    system: &'a DyadicSystem,
    weight: Measure,
    /// `w(Q)` per cube.
    mass: Vec<f64>,
    functions: Vec<Vec<HaarFunction>>,
}

/// Norm-scaling ratios `||h||_{L^p(w)} / w(Q)^{1/p - 1/2}` over the basis.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct NormScaling {
    /// Smallest `C` with every ratio (p = 1, 2, inf) in `[1/C, C]`.
    pub constant: f64,
    /// Smallest `C` with every `||h||_1 ||h||_inf` in `[1/C, C]`.
    pub l1_linf_constant: f64,
}

impl<'a> HaarBasis<'a> {
    pub fn build(system: &'a DyadicSystem, w: &Measure) -> Result<Self> {
        let n = system.space().len();
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "weight of length {} on {n} points",
                w.len()
            )));
        }
        if w.total() <= 0.0 {
            return Err(Error::ZeroMeasure(
                "the weight of a Haar basis vanishes identically".into(),
            ));
        }
        let mass: Vec<f64> = system.cubes().iter().map(|c| w.mass(&c.members)).collect();
        let functions = system
            .cubes()
            .iter()
            .map(|cube| {
                let masses: Vec<f64> = cube.children.iter().map(|&c| mass[c]).collect();
                cancellative(&masses, mass[cube.id])
                    .into_iter()
                    .enumerate()
                    .map(|(i, values)| HaarFunction {
                        cube: cube.id,
                        eps: i + 1,
                        values,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            system,
            weight: w.clone(),
            mass,
            functions,
        })
    }

    pub fn system(&self) -> &'a DyadicSystem {
        self.system
    }

    pub fn weight(&self) -> &Measure {
        &self.weight
    }

    pub fn mass(&self, q: usize) -> f64 {
        self.mass[q]
    }

    /// Cancellative functions of cube `q`.
    pub fn functions(&self, q: usize) -> &[HaarFunction] {
        &self.functions[q]
    }

    /// Number of children of `q` in the grid.
    pub fn m_q(&self, q: usize) -> usize {
        self.system.cubes()[q].children.len()
    }

    pub fn sup_m_q(&self) -> usize {
        self.system.max_children().max(1)
    }

    /// Point values of a Haar function.
    pub fn to_points(&self, h: &HaarFunction) -> Vec<f64> {
        let mut out = vec![0.0; self.weight.len()];
        for (&c, &v) in self.system.cubes()[h.cube].children.iter().zip(&h.values) {
            for &x in &self.system.cubes()[c].members {
                out[x] = v;
            }
        }
        out
    }

    /// `w(Q)^{-1/2} 1_Q` as point values.
    pub fn h0_points(&self, q: usize) -> Result<Vec<f64>> {
        if self.mass[q] <= 0.0 {
            return Err(Error::ZeroMeasure(format!("cube {q} has zero weight")));
        }
        let mut out = vec![0.0; self.weight.len()];
        let v = self.mass[q].powf(-0.5);
        for &x in &self.system.cubes()[q].members {
            out[x] = v;
        }
        Ok(out)
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.weight.len() {
            return Err(Error::DimensionMismatch(format!(
                "function of length {} on {} points",
                f.len(),
                self.weight.len()
            )));
        }
        Ok(())
    }

    /// `int_Q f dw` for every cube.
    pub fn integrals(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f)?;
        let w = self.weight.atoms();
        let cubes = self.system.cubes();
        let mut out = vec![0.0; cubes.len()];
        for q in self.system.bottom_up() {
            let cube = &cubes[q];
            out[q] = if cube.children.is_empty() {
                cube.members.iter().map(|&x| f[x] * w[x]).sum()
            } else {
                cube.children.iter().map(|&c| out[c]).sum()
            };
        }
        Ok(out)
    }

    fn coefficients_from(&self, q: usize, integrals: &[f64]) -> Vec<f64> {
        let children = &self.system.cubes()[q].children;
        self.functions[q]
            .iter()
            .map(|h| {
                children
                    .iter()
                    .zip(&h.values)
                    .map(|(&c, &v)| v * integrals[c])
                    .sum()
            })
            .collect()
    }

    /// `<f, h_Q^eps>_w` for every cube, indexed `[cube][eps - 1]`.
    pub fn coefficients(&self, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let integrals = self.integrals(f)?;
        Ok((0..self.system.len())
            .map(|q| self.coefficients_from(q, &integrals))
            .collect())
    }

    /// Adds `sum_eps c_eps h_Q^eps` to `out`.
    pub fn add_combination(&self, q: usize, coeffs: &[f64], out: &mut [f64]) {
        let cube = &self.system.cubes()[q];
        for (j, &c) in cube.children.iter().enumerate() {
            let v: f64 = self.functions[q]
                .iter()
                .zip(coeffs)
                .map(|(h, a)| a * h.values[j])
                .sum();
            if v != 0.0 {
                for &x in &self.system.cubes()[c].members {
                    out[x] += v;
                }
            }
        }
    }

    /// `Delta_Q f = sum_eps <f, h_Q^eps>_w h_Q^eps`.
    pub fn haar_project(&self, f: &[f64], q: usize) -> Result<Vec<f64>> {
        self.check_len(f)?;
        self.system.cube(q)?;
        let w = self.weight.atoms();
        let cube = &self.system.cubes()[q];
        let child_int: Vec<f64> = cube
            .children
            .iter()
            .map(|&c| {
                self.system.cubes()[c]
                    .members
                    .iter()
                    .map(|&x| f[x] * w[x])
                    .sum()
            })
            .collect();
        let coeffs: Vec<f64> = self.functions[q]
            .iter()
            .map(|h| h.values.iter().zip(&child_int).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = vec![0.0; f.len()];
        self.add_combination(q, &coeffs, &mut out);
        Ok(out)
    }

    /// `E_Q f`: the `w`-average of `f` over `Q`, on `Q`.
    pub fn expectation(&self, f: &[f64], q: usize) -> Result<Vec<f64>> {
        self.check_len(f)?;
        self.system.cube(q)?;
        if self.mass[q] <= 0.0 {
            return Err(Error::ZeroMeasure(format!("cube {q} has zero weight")));
        }
        let cube = &self.system.cubes()[q];
        let w = self.weight.atoms();
        let avg = cube.members.iter().map(|&x| f[x] * w[x]).sum::<f64>() / self.mass[q];
        let mut out = vec![0.0; f.len()];
        for &x in &cube.members {
            out[x] = avg;
        }
        Ok(out)
    }

    /// `E_k f = sum over level-k cubes of E_Q f`, skipping null cubes.
    pub fn expectation_level(&self, f: &[f64], k: i32) -> Result<Vec<f64>> {
        let integrals = self.integrals(f)?;
        let mut out = vec![0.0; f.len()];
        for &q in self.system.level(k) {
            if self.mass[q] > 0.0 {
                let avg = integrals[q] / self.mass[q];
                for &x in &self.system.cubes()[q].members {
                    out[x] = avg;
                }
            }
        }
        Ok(out)
    }

    /// `D_k f = sum over level-k cubes of Delta_Q f`.
    pub fn martingale_difference(&self, f: &[f64], k: i32) -> Result<Vec<f64>> {
        let integrals = self.integrals(f)?;
        let mut out = vec![0.0; f.len()];
        for &q in self.system.level(k) {
            let c = self.coefficients_from(q, &integrals);
            self.add_combination(q, &c, &mut out);
        }
        Ok(out)
    }

    /// Sum of `Delta_Q f` over the selected cubes.
    pub fn project_cubes(&self, f: &[f64], cubes: &[usize]) -> Result<Vec<f64>> {
        let integrals = self.integrals(f)?;
        let mut out = vec![0.0; f.len()];
        for &q in cubes {
            let c = self.coefficients_from(q, &integrals);
            self.add_combination(q, &c, &mut out);
        }
        Ok(out)
    }

    /// `<f, g>_w`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter()
            .zip(g)
            .zip(self.weight.atoms())
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Left side of Parseval: all squared cancellative coefficients plus the
    /// squared non-cancellative coefficient of every root.
    pub fn parseval_sum(&self, f: &[f64]) -> Result<f64> {
        let integrals = self.integrals(f)?;
        let mut total = 0.0;
        for q in 0..self.system.len() {
            total += self
                .coefficients_from(q, &integrals)
                .iter()
                .map(|c| c * c)
                .sum::<f64>();
        }
        for &r in self.system.roots() {
            if self.mass[r] > 0.0 {
                total += integrals[r] * integrals[r] / self.mass[r];
            }
        }
        Ok(total)
    }

    /// Split `f` into the part carried by cubes that are good with respect to
    /// `other` and the part carried by the bad ones.
    pub fn split_good_bad(
        &self,
        f: &[f64],
        other: &DyadicSystem,
        r: u32,
        eps: f64,
    ) -> Result<GoodBadSplit> {
        let mut bad = Vec::new();
        for q in 0..self.system.len() {
            if self.functions[q].is_empty() {
                continue;
            }
            if !self.system.is_good(q, other, r, eps)? {
                bad.push(q);
            }
        }
        let f_bad = self.project_cubes(f, &bad)?;
        let f_good = f.iter().zip(&f_bad).map(|(a, b)| a - b).collect();
        Ok(GoodBadSplit {
            f_good,
            f_bad,
            bad_cubes: bad,
        })
    }

    /// Norm-scaling constants of the basis.
    pub fn norm_scaling(&self) -> NormScaling {
        let cubes = self.system.cubes();
        let mut c: f64 = 1.0;
        let mut c8: f64 = 1.0;
        let spread = |x: f64| x.max(1.0 / x);
        for (q, funcs) in self.functions.iter().enumerate() {
            let wq = self.mass[q];
            for h in funcs {
                let (mut l1, mut l2, mut linf) = (0.0, 0.0, 0.0f64);
                for (&ch, &v) in cubes[q].children.iter().zip(&h.values) {
                    let m = self.mass[ch];
                    if m > NULL_CHILD * wq {
                        l1 += v.abs() * m;
                        l2 += v * v * m;
                        linf = linf.max(v.abs());
                    }
                }
                let l2 = l2.sqrt();
                c = c
                    .max(spread(l1 / wq.sqrt()))
                    .max(spread(l2))
                    .max(spread(linf * wq.sqrt()));
                c8 = c8.max(spread(l1 * linf));
            }
        }
        NormScaling {
            constant: c,
            l1_linf_constant: c8,
        }
    }
}

pub struct GoodBadSplit {
    pub f_good: Vec<f64>,
    pub f_bad: Vec<f64>,
    pub bad_cubes: Vec<usize>,
}

/// Orthonormal mean-zero vectors in the weighted space of child-constant
/// functions. `masses[j]` is the weight of child `j`; the result lists the
/// values per child, zero on null children.
fn cancellative(masses: &[f64], total: f64) -> Vec<Vec<f64>> {
    let kept: Vec<usize> = (0..masses.len())
        .filter(|&j| masses[j] > NULL_CHILD * total)
        .collect();
    if kept.len() < 2 {
        return Vec::new();
    }
    let m: Vec<f64> = kept.iter().map(|&j| masses[j]).collect();
    let w: f64 = m.iter().sum();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(&m).map(|((x, y), z)| x * y * z).sum()
    };
    let mut basis: Vec<Vec<f64>> = vec![vec![w.powf(-0.5); kept.len()]];
    for j in 0..kept.len() {
        if basis.len() == kept.len() {
            break;
        }
        let mut v = vec![0.0; kept.len()];
        v[j] = 1.0;
        // two passes keep the result orthogonal to rounding level
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 * m[j].sqrt() {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    basis
        .into_iter()
        .skip(1)
        .map(|b| {
            let mut full = vec![0.0; masses.len()];
            for (&j, v) in kept.iter().zip(b) {
                full[j] = v;
            }
            full
        })
        .collect()
}
