//! Run configuration: grid, domain, operator, body, initial condition,
//! boundary condition, time stepping and analysis tolerances.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use matzoh_core::classify::ClassifyConfig;
use matzoh_core::convex::BodySpec;
use matzoh_core::evolve::TimeProfile;
use matzoh_core::grid::{DomainMask, Grid, ScalarField};
use matzoh_core::invariance::DTestConfig;
use matzoh_core::isoparametric::IsoConfig;
use matzoh_core::operators::OperatorSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, ExitStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default = "heat")]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub body: Option<BodySpec>,
    pub initial: InitialCondition,
    #[serde(default)]
    pub bc: BcSpec,
    pub evolve: EvolveSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn heat() -> OperatorSpec {
    OperatorSpec::Heat {}
}

/// Bounds plus either node counts or a uniform spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, CliError> {
        let g = match (&self.points, self.spacing) {
            (Some(p), None) => Grid::spanning(&self.lo, &self.hi, p),
            (None, Some(h)) => Grid::with_spacing(&self.lo, &self.hi, h),
            _ => return Err(CliError::config("grid: give exactly one of `points` or `spacing`")),
        };
        g.map_err(|e| CliError::config(format!("grid: {e}")))
    }
}

/// Bounded domains from the catalog; a node belongs to the domain when the
/// predicate holds at its coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// The whole grid box.
    Box {},
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Annulus {
        center: Vec<f64>,
        inner: f64,
        outer: f64,
    },
    /// `|P (x - center)| <= radius` with `P` the projection onto `axes`.
    Cylinder {
        center: Vec<f64>,
        radius: f64,
        axes: Vec<usize>,
    },
    /// `lo <= x . normal <= hi`.
    Strip {
        normal: Vec<f64>,
        lo: f64,
        hi: f64,
    },
}

impl MaskSpec {
    pub fn build(&self, grid: &Grid) -> Result<DomainMask, CliError> {
        let n = grid.dim();
        let check = |v: &[f64], what: &str| {
            if v.len() == n {
                Ok(())
            } else {
                Err(CliError::config(format!("mask: {what} must have {n} entries")))
            }
        };
        let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mask = match self {
            MaskSpec::Box {} => DomainMask::full(grid),
            MaskSpec::Ball { center, radius } => {
                check(center, "center")?;
                DomainMask::from_predicate(grid, |x| dist(x, center) <= *radius)
            }
            MaskSpec::Annulus { center, inner, outer } => {
                check(center, "center")?;
                if !(inner < outer) {
                    return Err(CliError::config("mask: annulus needs inner < outer"));
                }
                DomainMask::from_predicate(grid, |x| (*inner..=*outer).contains(&dist(x, center)))
            }
            MaskSpec::Cylinder { center, radius, axes } => {
                check(center, "center")?;
                if axes.is_empty() || axes.iter().any(|&a| a >= n) {
                    return Err(CliError::config("mask: cylinder axes out of range"));
                }
                DomainMask::from_predicate(grid, |x| {
                    axes.iter().map(|&a| (x[a] - center[a]).powi(2)).sum::<f64>().sqrt() <= *radius
                })
            }
            MaskSpec::Strip { normal, lo, hi } => {
                check(normal, "normal")?;
                DomainMask::from_predicate(grid, |x| {
                    let d: f64 = x.iter().zip(normal).map(|(a, b)| a * b).sum();
                    (*lo..=*hi).contains(&d)
                })
            }
        };
        if mask.interior_nodes().is_empty() {
            return Err(CliError::config("mask: domain has no interior nodes"));
        }
        Ok(mask)
    }
}

fn one() -> f64 {
    1.0
}

/// Initial data from the built-in catalog. `exact` gives the closed-form
/// heat solution where one exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `offset + amplitude * prod sin(k_i (x_i - lo_i))`.
    Eigenmode {
        wavenumbers: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Heat kernel `amplitude (4 pi s)^(-N/2) exp(-|x - c|^2 / 4s)` at
    /// `s = t0 + t`.
    GaussianKernel {
        t0: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude |x - c|^power`.
    RadialPower {
        power: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `w = constant + l . x + sum q_i x_i^2 / 2`, drifting as `w + (sum q_i) t`.
    AffineDrift {
        quadratic: Vec<f64>,
        #[serde(default)]
        linear: Option<Vec<f64>>,
        #[serde(default)]
        constant: f64,
    },
    /// Values tabulated in a field file on the configured grid.
    Custom { path: PathBuf },
}

impl InitialCondition {
    fn check_dim(&self, n: usize) -> Result<(), CliError> {
        let bad = |v: &Option<Vec<f64>>| v.as_ref().is_some_and(|v| v.len() != n);
        let ok = match self {
            Self::Eigenmode { wavenumbers, .. } => wavenumbers.len() == n,
            Self::GaussianKernel { center, t0, .. } => !bad(center) && *t0 > 0.0,
            Self::RadialPower { center, .. } => !bad(center),
            Self::AffineDrift { quadratic, linear, .. } => quadratic.len() == n && !bad(linear),
            Self::Custom { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::config(format!(
                "initial: parameters do not match dimension {n} (gaussian t0 must be positive)"
            )))
        }
    }

    /// Closed-form heat solution `u(x, t)`, if the catalog entry has one.
    pub fn exact(&self, grid: &Grid) -> Option<TimeProfile> {
        let n = grid.dim();
        let lo = grid.origin().to_vec();
        let center = |c: &Option<Vec<f64>>| c.clone().unwrap_or_else(|| vec![0.0; n]);
        let r2 = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        match self.clone() {
            Self::Eigenmode {
                wavenumbers,
                amplitude,
                offset,
            } => {
                let rate: f64 = wavenumbers.iter().map(|k| k * k).sum();
                Some(Arc::new(move |x, t| {
                    let p: f64 = x
                        .iter()
                        .zip(&wavenumbers)
                        .zip(&lo)
                        .map(|((xi, k), l)| (k * (xi - l)).sin())
                        .product();
                    offset + amplitude * (-rate * t).exp() * p
                }))
            }
            Self::GaussianKernel {
                t0,
                center: c,
                amplitude,
            } => {
                let c = center(&c);
                Some(Arc::new(move |x, t| {
                    let s = t0 + t;
                    amplitude
                        * (4.0 * std::f64::consts::PI * s).powf(-(n as f64) / 2.0)
                        * (-r2(x, &c) / (4.0 * s)).exp()
                }))
            }
            Self::RadialPower {
                power,
                center: c,
                amplitude,
            } => {
                let c = center(&c);
                if power == 2.0 {
                    Some(Arc::new(move |x, t| amplitude * (r2(x, &c) + 2.0 * n as f64 * t)))
                } else if power == 0.0 {
                    Some(Arc::new(move |_, _| amplitude))
                } else {
                    None
                }
            }
            Self::AffineDrift {
                quadratic,
                linear,
                constant,
            } => {
                let l = linear.unwrap_or_else(|| vec![0.0; n]);
                let gamma: f64 = quadratic.iter().sum();
                Some(Arc::new(move |x, t| {
                    let w: f64 = constant
                        + x.iter()
                            .zip(&l)
                            .zip(&quadratic)
                            .map(|((xi, li), qi)| li * xi + 0.5 * qi * xi * xi)
                            .sum::<f64>();
                    w + gamma * t
                }))
            }
            Self::Custom { .. } => None,
        }
    }

    pub fn field(
        &self,
        grid: &Arc<Grid>,
        mask: &Arc<DomainMask>,
        t: f64,
        base: &Path,
    ) -> Result<ScalarField, CliError> {
        self.check_dim(grid.dim())?;
        if let Self::Custom { path } = self {
            let p = base.join(path);
            let f = matzoh_core::io::load_field(&p)
                .map_err(|e| CliError::config(format!("initial: {}: {e}", p.display())))?;
            let g = f.grid();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            if g.shape() != grid.shape() || !close(g.origin(), grid.origin()) || !close(g.spacing(), grid.spacing()) {
                return Err(CliError::config(
                    "initial: tabulated field grid differs from the configured grid",
                ));
            }
            return ScalarField::new(grid.clone(), mask.clone(), f.values().to_vec(), Some(t))
                .map_err(|e| CliError::config(format!("initial: {e}")));
        }
        let u = self
            .exact(grid)
            .ok_or_else(|| CliError::config("initial: radial_power without closed form must be sampled at t = 0"));
        let u = match (self, u) {
            (
                Self::RadialPower {
                    power,
                    center,
                    amplitude,
                },
                Err(_),
            ) => {
                let c = center.clone().unwrap_or_else(|| vec![0.0; grid.dim()]);
                let (p, a) = (*power, *amplitude);
                Arc::new(move |x: &[f64], _t: f64| {
                    a * x
                        .iter()
                        .zip(&c)
                        .map(|(xi, ci)| (xi - ci).powi(2))
                        .sum::<f64>()
                        .powf(p / 2.0)
                }) as Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>
            }
            (_, u) => u?,
        };
        ScalarField::from_fn(grid.clone(), mask.clone(), Some(t), |x| u(x, t))
            .map_err(|e| CliError::new(ExitStatus::Numerical, "initial", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BcSpec {
    /// Boundary values of the initial data held fixed.
    Frozen {},
    Dirichlet {
        value: f64,
    },
    Neumann {},
    /// The closed-form heat solution on the boundary.
    Exact {},
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Explicit time stepping from the initial data.
    #[default]
    Evolve,
    /// Closed-form solution sampled at the snapshot times.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snapshots {
    List(Vec<f64>),
    Range(SnapshotRange),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRange {
    pub from: f64,
    pub to: f64,
    pub count: usize,
}

impl Snapshots {
    pub fn times(&self) -> Result<Vec<f64>, CliError> {
        let ts = match self {
            Self::List(v) => v.clone(),
            Self::Range(r) if r.count >= 2 => (0..r.count)
                .map(|k| r.from + (r.to - r.from) * k as f64 / (r.count - 1) as f64)
                .collect(),
            Self::Range(_) => return Err(CliError::config("evolve: snapshot range needs count >= 2")),
        };
        if ts.is_empty() || ts.windows(2).any(|w| !(w[1] > w[0])) || ts.iter().any(|t| !t.is_finite()) {
            return Err(CliError::config("evolve: snapshot times must be finite and increasing"));
        }
        Ok(ts)
    }
}

fn safety() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSpec {
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub t_start: f64,
    pub snapshots: Snapshots,
    /// Fixed time step; the CFL bound is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "safety")]
    pub cfl_safety: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_inv: f64,
    pub kappa: f64,
    pub d_abs_floor: f64,
    pub lambda_sigma: f64,
    pub lambda_floor: f64,
    pub tol_affine: f64,
    pub tol_iso: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_bins: Option<usize>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Box {}
    }
}

impl Default for BcSpec {
    fn default() -> Self {
        BcSpec::Frozen {}
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        let c = ClassifyConfig::default();
        Self {
            tol_inv: c.tol_inv,
            kappa: c.d_test.kappa,
            d_abs_floor: c.d_test.abs_floor,
            lambda_sigma: c.lambda_sigma,
            lambda_floor: c.lambda_floor,
            tol_affine: c.tol_affine,
            tol_iso: c.iso.tol_iso,
            n_bins: None,
        }
    }
}

impl Tolerances {
    pub fn classify_config(&self) -> ClassifyConfig {
        ClassifyConfig {
            n_bins: self.n_bins,
            tol_inv: self.tol_inv,
            d_test: DTestConfig {
                kappa: self.kappa,
                abs_floor: self.d_abs_floor,
            },
            lambda_sigma: self.lambda_sigma,
            lambda_floor: self.lambda_floor,
            tol_affine: self.tol_affine,
            iso: IsoConfig {
                tol_iso: self.tol_iso,
                exclude_critical: true,
                ..IsoConfig::default()
            },
            ..ClassifyConfig::default()
        }
    }
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Levels for surface typing; evenly spaced interior levels otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(default = "three")]
    pub n_levels: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            levels: None,
            n_levels: 3,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// SHA-256 of the canonical JSON form of a value: keys sorted, no
/// whitespace, defaults filled in.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    // `serde_json::Value` keeps object keys in sorted order
    let v = serde_json::to_value(value).expect("serializable value");
    let text = serde_json::to_string(&v).expect("serializable value");
    hex::encode(Sha256::digest(text.as_bytes()))
}
