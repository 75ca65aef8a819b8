//! JSON scenario files.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constants::{PivotalMode, TwoWeightParams};
use crate::dyadic::{DyadicParams, Mode};
use crate::error::{Error, Result};
use crate::operators::Kernel;
use crate::rng;
use crate::space::{BaseMeasure, Measure, Space};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Grid1d,
    Grid2d,
    Tree,
    Points,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    #[default]
    Lebesgue,
    Bessel,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub kind: SpaceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    /// Tree depth; defaults to `log2(n_points)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    #[serde(default = "unit_domain")]
    pub domain: [f64; 2],
    #[serde(default)]
    pub base_measure: BaseKind,
    /// Bessel exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "one")]
    pub a0: f64,
    /// Atoms for `custom` and `points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dim: Option<f64>,
}

fn unit_domain() -> [f64; 2] {
    [0.0, 1.0]
}

fn one() -> f64 {
    1.0
}

/// Weight-pair families. Every family scales the base measure, so weights
/// are atoms `u_i = mu_i * density_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// `u = v = mu`.
    Lebesgue,
    /// `|x - a|^beta` densities, `a` the point `center`.
    Power {
        beta_u: f64,
        beta_v: f64,
        #[serde(default)]
        center: Option<usize>,
    },
    /// Independent log-normal densities `exp(sigma Z)`.
    Lognormal {
        #[serde(default = "one")]
        sigma: f64,
    },
    /// Log-normal densities with each point given to `u` or `v` by a coin flip.
    Disjoint {
        #[serde(default = "one")]
        sigma: f64,
    },
    /// `u = mu` off the spike, `v = mass` at the spike plus `background * mu`.
    Spike {
        index: usize,
        mass: f64,
        #[serde(default)]
        background: f64,
    },
    Explicit {
        u: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Lognormal { sigma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(default = "one")]
    pub kappa: f64,
    /// Defaults to the space's dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dim: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_r")]
    pub r: u32,
    #[serde(default = "default_lambda")]
    pub eps: f64,
    /// Defaults to `shifted1d` on lines and `generic` elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub relaxed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_min: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<i32>,
    #[serde(default)]
    pub pivotal_mode: PivotalMode,
    #[serde(default)]
    pub goodness_filter: bool,
    /// With `false` every grid uses seed 0: the unshifted binary grid in
    /// `shifted1d` mode.
    #[serde(default = "yes")]
    pub random_shift: bool,
}

fn default_lambda() -> f64 {
    0.2
}

fn default_delta() -> f64 {
    0.5
}

fn default_r() -> u32 {
    2
}

impl Default for ParamsSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Cubes sampled as `S` by the lemma diagnostics.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Closeness parameter of the weak boundedness diagnostic.
    #[serde(default = "one_u32")]
    pub rho: u32,
    #[serde(default = "yes")]
    pub lemmas: bool,
    #[serde(default = "yes")]
    pub corona: bool,
}

fn default_samples() -> usize {
    200
}

fn one_u32() -> u32 {
    1
}

fn yes() -> bool {
    true
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub space: SpaceSpec,
    #[serde(default = "Kernel::hilbert")]
    pub kernel: Kernel,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grids")]
    pub grids: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

fn default_grids() -> usize {
    4
}

fn config_error(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace(['.', '['], "/").replace(']', ""))
            };
            config_error(&pointer, e.into_inner().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A 1D Lebesgue grid with the Hilbert kernel.
    pub fn line(n_points: usize, weights: WeightSpec, seed: u64) -> Self {
        Scenario {
            name: None,
            space: SpaceSpec {
                kind: SpaceKind::Grid1d,
                n_points: Some(n_points),
                depth: None,
                domain: unit_domain(),
                base_measure: BaseKind::Lebesgue,
                lambda: None,
                a0: 1.0,
                atoms: None,
                coords: None,
                n_dim: None,
            },
            kernel: Kernel::hilbert(),
            weights,
            params: ParamsSpec::default(),
            seed,
            grids: default_grids(),
            diagnostics: DiagnosticsSpec::default(),
        }
    }

    /// Semantic checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let s = &self.space;
        let n = self
            .point_count()
            .map_err(|e| config_error("/space", e.to_string()))?;
        if n == 0 {
            return Err(config_error(
                "/space/n_points",
                "the space needs at least one point",
            ));
        }
        if !(s.a0 >= 1.0) {
            return Err(config_error("/space/a0", "a0 must be at least 1"));
        }
        if s.base_measure == BaseKind::Bessel && s.lambda.is_none_or(|l| !(l >= 0.0)) {
            return Err(config_error(
                "/space/lambda",
                "the Bessel measure needs lambda >= 0",
            ));
        }
        if s.base_measure == BaseKind::Custom && s.atoms.as_ref().is_none_or(|a| a.len() != n) {
            return Err(config_error(
                "/space/atoms",
                format!("a custom base measure needs {n} atoms"),
            ));
        }
        self.two_weight_params()
            .map_err(|e| config_error("/params/lambda", e.to_string()))?;
        if self.grids == 0 {
            return Err(config_error("/grids", "at least one grid is needed"));
        }
        match &self.weights {
            WeightSpec::Explicit { u, v } => {
                if u.len() != n {
                    return Err(config_error(
                        "/weights/u",
                        format!("expected {n} atoms, got {}", u.len()),
                    ));
                }
                if v.len() != n {
                    return Err(config_error(
                        "/weights/v",
                        format!("expected {n} atoms, got {}", v.len()),
                    ));
                }
                if let Some(i) = u
                    .iter()
                    .chain(v)
                    .position(|a| !(a.is_finite() && *a >= 0.0))
                {
                    let (key, i) = if i < n { ("u", i) } else { ("v", i - n) };
                    return Err(config_error(
                        &format!("/weights/{key}/{i}"),
                        "atoms must be finite and nonnegative",
                    ));
                }
            }
            WeightSpec::Spike {
                index,
                mass,
                background,
            } => {
                if *index >= n {
                    return Err(config_error(
                        "/weights/index",
                        format!("spike index {index} outside {n} points"),
                    ));
                }
                if !(*mass > 0.0 && *background >= 0.0) {
                    return Err(config_error("/weights/mass", "spike mass must be positive"));
                }
            }
            WeightSpec::Power {
                center: Some(c), ..
            } if *c >= n => {
                return Err(config_error(
                    "/weights/center",
                    format!("center {c} outside {n} points"),
                ));
            }
            WeightSpec::Lognormal { sigma } | WeightSpec::Disjoint { sigma }
                if !(*sigma >= 0.0) =>
            {
                return Err(config_error("/weights/sigma", "sigma must be nonnegative"));
            }
            _ => {}
        }
        Ok(())
    }

    fn point_count(&self) -> Result<usize> {
        let s = &self.space;
        Ok(match s.kind {
            SpaceKind::Grid1d | SpaceKind::Grid2d => s
                .n_points
                .ok_or_else(|| Error::param("n_points is required"))?,
            SpaceKind::Tree => 1usize << self.tree_depth()?,
            SpaceKind::Points => s
                .coords
                .as_ref()
                .ok_or_else(|| Error::param("points need coords"))?
                .len(),
        })
    }

    fn tree_depth(&self) -> Result<u32> {
        match (self.space.depth, self.space.n_points) {
            (Some(d), _) => Ok(d),
            (None, Some(n)) if n.is_power_of_two() => Ok(n.trailing_zeros()),
            _ => Err(Error::param(
                "a tree needs depth or a power-of-two n_points",
            )),
        }
    }

    pub fn build_space(&self) -> Result<Arc<Space>> {
        let s = &self.space;
        let base = match s.base_measure {
            BaseKind::Lebesgue => BaseMeasure::Lebesgue,
            BaseKind::Bessel => BaseMeasure::Bessel {
                lambda: s.lambda.unwrap_or(0.0),
            },
            BaseKind::Custom => BaseMeasure::Custom(s.atoms.clone().unwrap_or_default()),
        };
        let n = self.point_count()?;
        let space = match s.kind {
            SpaceKind::Grid1d => Space::grid1d(n, s.domain, base, s.a0)?,
            SpaceKind::Grid2d => Space::grid2d(n, s.domain, base, s.a0)?,
            SpaceKind::Tree => Space::tree(self.tree_depth()?, base)?,
            SpaceKind::Points => {
                let coords = s.coords.clone().unwrap_or_default();
                let dim = coords.first().map_or(1, Vec::len) as f64;
                let atoms = s.atoms.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
                Space::from_coords(coords, atoms, s.n_dim.unwrap_or(dim), s.a0)?
            }
        };
        Ok(Arc::new(space))
    }

    pub fn two_weight_params(&self) -> Result<TwoWeightParams> {
        let n_dim = match self.params.n_dim.or(self.space.n_dim) {
            Some(n) => n,
            None => match self.space.kind {
                SpaceKind::Grid2d => 2.0,
                SpaceKind::Points => self
                    .space
                    .coords
                    .as_ref()
                    .and_then(|c| c.first())
                    .map_or(1, Vec::len) as f64,
                _ => 1.0,
            },
        };
        TwoWeightParams::new(self.params.kappa, n_dim, self.params.lambda)
    }

    pub fn dyadic_params(&self) -> DyadicParams {
        let p = &self.params;
        let mode = p.mode.unwrap_or(match self.space.kind {
            SpaceKind::Grid1d => Mode::Shifted1d,
            SpaceKind::Points
                if self
                    .space
                    .coords
                    .as_ref()
                    .is_some_and(|c| c.iter().all(|x| x.len() == 1)) =>
            {
                Mode::Shifted1d
            }
            _ => Mode::Generic,
        });
        let mut d = match mode {
            Mode::Shifted1d => DyadicParams::shifted1d(),
            Mode::Generic => DyadicParams::generic(p.delta),
        };
        d.r_good = p.r;
        d.eps_good = p.eps;
        d.relaxed = p.relaxed;
        d.k_min = p.k_min;
        d.k_max = p.k_max;
        d
    }

    /// The weight pair, drawn from the `weights` stream of `seed`.
    pub fn build_weights(&self, space: &Space, seed: u64) -> Result<(Measure, Measure)> {
        let mu = space.mu().atoms();
        let n = mu.len();
        let mut r = rng::stream(seed, "weights");
        let scale = |d: &[f64]| Measure::new(mu.iter().zip(d).map(|(m, x)| m * x).collect());
        match &self.weights {
            WeightSpec::Lebesgue => Ok((space.mu().clone(), space.mu().clone())),
            WeightSpec::Power {
                beta_u,
                beta_v,
                center,
            } => {
                let c = center.unwrap_or(n / 2);
                let floor = 0.5 * space.resolution();
                let dist: Vec<f64> = (0..n).map(|i| space.d(i, c).max(floor)).collect();
                let du: Vec<f64> = dist.iter().map(|d| d.powf(*beta_u)).collect();
                let dv: Vec<f64> = dist.iter().map(|d| d.powf(*beta_v)).collect();
                Ok((scale(&du)?, scale(&dv)?))
            }
            WeightSpec::Lognormal { sigma } => {
                let mut draw = || -> f64 {
                    let z: f64 = StandardNormal.sample(&mut r);
                    (sigma * z).exp()
                };
                let du: Vec<f64> = (0..n).map(|_| draw()).collect();
                let dv: Vec<f64> = (0..n).map(|_| draw()).collect();
                Ok((scale(&du)?, scale(&dv)?))
            }
            WeightSpec::Disjoint { sigma } => {
                let mut du = vec![0.0; n];
                let mut dv = vec![0.0; n];
                for i in 0..n {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let x = (sigma * z).exp();
                    if r.random_bool(0.5) {
                        du[i] = x;
                    } else {
                        dv[i] = x;
                    }
                }
                Ok((scale(&du)?, scale(&dv)?))
            }
            WeightSpec::Spike {
                index,
                mass,
                background,
            } => {
                let mut u = mu.to_vec();
                u[*index] = 0.0;
                let mut v: Vec<f64> = mu.iter().map(|m| m * background).collect();
                v[*index] += mass;
                Ok((Measure::new(u)?, Measure::new(v)?))
            }
            WeightSpec::Explicit { u, v } => {
                Ok((Measure::new(u.clone())?, Measure::new(v.clone())?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointer_on_schema_error() {
        let err = Scenario::from_json(r#"{"space": {"kind": "grid1d", "n_points": "many"}}"#)
            .unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/space/n_points"),
            e => panic!("{e}"),
        }
        let err = Scenario::from_json(
            r#"{"space": {"kind": "grid1d", "n_points": 8}, "params": {"lambda": 0.9}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref pointer, .. } if pointer == "/params/lambda"));
    }

    #[test]
    fn disjoint_weights_share_no_atom() {
        let s = Scenario::line(64, WeightSpec::Disjoint { sigma: 1.0 }, 3);
        let space = s.build_space().unwrap();
        let (u, v) = s.build_weights(&space, 3).unwrap();
        assert!(u.common_atoms(&v).is_empty());
        assert!(u.total() > 0.0 && v.total() > 0.0);
    }

    #[test]
    fn round_trip() {
        let s = Scenario::line(16, WeightSpec::Lognormal { sigma: 0.5 }, 1);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }
}
