//! Versioned JSON report.
//!
//! Every field is a deterministic function of the inputs except
//! `provenance.wall_clock_seconds`. Non-finite numbers never appear: values
//! that are undefined at a lattice point are `null`.

use std::path::Path;

use matzoh_core::classify::{Artifacts, ClassificationReport};
use matzoh_core::invariance::{
    d_test, determinant_d, determinant_xi, eta_partials, residual_of, DTest, DTestConfig, Determinant, EtaPartials,
    EtaTable,
};
use matzoh_core::isoparametric::{CurvatureCluster, GeodesicTrace, LevelFunctionFit, LevelGeometry, SurfaceTypeReport};
use serde::{Deserialize, Serialize};

use crate::{CliError, ExitStatus};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub provenance: Provenance,
    pub status: Status,
    pub invariance: Option<InvarianceSection>,
    pub classification: Option<ClassificationReport>,
    pub isoparametric: Option<IsoSection>,
    pub geodesics: Option<GeodesicSection>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON of the command inputs.
    pub config_sha256: String,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Status {
    pub exit_code: i32,
    /// Branch label, `invariant` / `not_invariant`, `isoparametric` /
    /// `not_isoparametric`, `ok` or `error`.
    pub verdict: String,
    pub stage: Option<String>,
    pub error: Option<String>,
}

/// Level profile `eta(s, t)` with the invariance residual and the
/// determinant lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceSection {
    pub tol: f64,
    pub times: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub invariant: bool,
    pub s_bins: Vec<f64>,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// `eta[k][b]`; `null` for empty bins.
    pub eta: Vec<Vec<Option<f64>>>,
    pub spread: Vec<Vec<f64>>,
    pub determinant: Option<DeterminantLattice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeterminantLattice {
    /// `d` for the heat determinant, `d_xi` for the quasi-linear one.
    pub kind: String,
    pub s: Vec<f64>,
    pub times: Vec<f64>,
    /// Entries are `null` where the derivative stencils are incomplete.
    pub d: Vec<Vec<Option<f64>>>,
    pub normalized: Vec<Vec<Option<f64>>>,
    pub noise: Vec<Vec<Option<f64>>>,
    pub significant: Vec<Vec<bool>>,
    pub nonzero: bool,
    pub max_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsoSection {
    pub operator: String,
    pub pass: bool,
    pub tol: f64,
    /// Fit of `G phi = f(phi)`.
    pub f: LevelFunctionFit,
    /// Fit of `Q phi = g(phi)`.
    pub g: LevelFunctionFit,
    pub euler: Option<f64>,
    pub excluded_nodes: usize,
    pub surfaces: Vec<SurfaceTypeReport>,
    pub levels: Vec<LevelGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicSection {
    pub tau_max: f64,
    pub n_steps: usize,
    pub normalized: bool,
    pub traces: Vec<GeodesicTrace>,
    pub max_straightness: f64,
    pub max_level_rate_error: f64,
    pub parallelism: f64,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn lattice(rows: &[Vec<f64>], valid: &[Vec<bool>]) -> Vec<Vec<Option<f64>>> {
    rows.iter()
        .zip(valid)
        .map(|(r, ok)| {
            r.iter()
                .zip(ok)
                .map(|(&v, &ok)| if ok { finite(v) } else { None })
                .collect()
        })
        .collect()
}

impl DeterminantLattice {
    pub fn new(p: &EtaPartials, det: &Determinant, dt: &DTest, xi: bool) -> Self {
        Self {
            kind: if xi { "d_xi" } else { "d" }.into(),
            s: p.s.clone(),
            times: p.times.clone(),
            d: lattice(&det.d, &p.valid),
            normalized: lattice(&dt.normalized, &p.valid),
            noise: lattice(&dt.noise, &p.valid),
            significant: dt.significant.clone(),
            nonzero: dt.nonzero,
            max_normalized: dt.max_normalized,
        }
    }
}

impl InvarianceSection {
    fn from_table(table: &EtaTable, tol: f64) -> Self {
        let residual = residual_of(table);
        let max_residual = residual.iter().copied().fold(0.0, f64::max);
        Self {
            tol,
            times: table.times.clone(),
            max_residual,
            invariant: residual.iter().all(|&r| r <= tol),
            residual,
            s_bins: table.s_bins.clone(),
            bin_width: table.bin_width,
            counts: table.counts.clone(),
            eta: table
                .eta
                .iter()
                .map(|r| r.iter().map(|&v| finite(v)).collect())
                .collect(),
            spread: table.spread.clone(),
            determinant: None,
        }
    }

    /// Residuals and, where `eta` is monotone, the determinant lattice
    /// (the quasi-linear one when `alpha` is given).
    pub fn compute(table: &EtaTable, tol: f64, alpha: Option<f64>, cfg: &DTestConfig) -> (Self, Option<String>) {
        let mut sec = Self::from_table(table, tol);
        let lattice = eta_partials(table, alpha).and_then(|p| {
            let det = match alpha {
                Some(_) => determinant_xi(&p)?,
                None => determinant_d(&p),
            };
            let dt = d_test(&p, &det, cfg, alpha.is_some());
            Ok(DeterminantLattice::new(&p, &det, &dt, alpha.is_some()))
        });
        match lattice {
            Ok(l) => {
                sec.determinant = Some(l);
                (sec, None)
            }
            Err(e) => (sec, Some(format!("determinant lattice unavailable: {e}"))),
        }
    }

    pub fn from_artifacts(a: &Artifacts, tol: f64, xi: bool) -> Self {
        let mut sec = Self::from_table(&a.table, tol);
        sec.determinant = Some(DeterminantLattice::new(&a.partials, &a.determinant, &a.d_test, xi));
        sec
    }
}

/// Drops curvature clusters that are undefined (no samples).
pub fn finite_clusters(c: Vec<CurvatureCluster>) -> Vec<CurvatureCluster> {
    c.into_iter().filter(|c| c.value.is_finite()).collect()
}

impl Report {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            provenance: Provenance {
                config_sha256,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                wall_clock_seconds: 0.0,
            },
            status: Status {
                exit_code: 0,
                verdict: "ok".into(),
                stage: None,
                error: None,
            },
            invariance: None,
            classification: None,
            isoparametric: None,
            geodesics: None,
            warnings: Vec::new(),
        }
    }

    pub fn exit_status(&self) -> ExitStatus {
        match self.status.exit_code {
            0 => ExitStatus::Ok,
            1 => ExitStatus::Config,
            2 => ExitStatus::NotInvariant,
            3 => ExitStatus::Mixed,
            _ => ExitStatus::Numerical,
        }
    }

    pub fn set_verdict(&mut self, verdict: &str, status: ExitStatus) {
        self.status.verdict = verdict.into();
        self.status.exit_code = status.code();
    }

    pub fn fail(&mut self, err: &CliError) {
        self.status.exit_code = err.status.code();
        self.status.stage = Some(err.stage.clone());
        self.status.error = Some(err.message.clone());
        if err.status != ExitStatus::NotInvariant && err.status != ExitStatus::Mixed {
            self.status.verdict = "error".into();
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::io("report", e))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io("report", e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io("report", format!("{}: {e}", path.display())))
    }
}
