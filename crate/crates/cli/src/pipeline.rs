//! Stages shared by the subcommands: build the series, gate on invariance,
//! classify, and analyse level geometry. Each stage fills a [`Report`] and
//! tags its errors with the stage name.

use std::path::Path;
use std::sync::Arc;

use log::info;
use matzoh_core::classify::{classify_detailed, Branch, ClassifyConfig};
use matzoh_core::convex::ConvexBody;
use matzoh_core::evolve::{self, BoundaryCondition, EvolveConfig, TimeStep};
use matzoh_core::grid::{ScalarField, TimeSeriesField};
use matzoh_core::invariance::build_eta;
use matzoh_core::isoparametric::{
    classify_surface_with, geodesic_trace, isoparametric_residual, level_geometry, normalize_to_unit_f, parallelism,
    project_to_level, DerivativeFields,
};
use matzoh_core::operators::{OperatorKind, QuasiLinearOperator};
use matzoh_core::Error;

use crate::config::{canonical_hash, BcSpec, RunConfig, Source};
use crate::report::{finite_clusters, GeodesicSection, InvarianceSection, IsoSection, Report};
use crate::{CliError, ExitStatus, Stage};

/// Builds the time series a configuration describes, by explicit time
/// stepping or by sampling the closed-form solution.
pub fn build_series(cfg: &RunConfig, base: &Path) -> Result<TimeSeriesField, CliError> {
    let grid = Arc::new(cfg.grid.build()?);
    let mask = Arc::new(cfg.mask.build(&grid)?);
    let op = cfg.operator.build(grid.dim()).stage("config")?;
    let times = cfg.evolve.snapshots.times()?;
    if times[0] < cfg.evolve.t_start {
        return Err(CliError::config("evolve: snapshots must not precede t_start"));
    }
    match cfg.evolve.source {
        Source::Analytic => {
            if !op.is_heat() {
                return Err(CliError::config("evolve: analytic source requires the heat operator"));
            }
            let u = cfg
                .initial
                .exact(&grid)
                .ok_or_else(|| CliError::config("evolve: initial condition has no closed form"))?;
            info!("sampling closed-form solution at {} times", times.len());
            let snaps = times
                .iter()
                .map(|&t| ScalarField::from_fn(grid.clone(), mask.clone(), Some(t), |x| u(x, t)))
                .collect::<matzoh_core::Result<Vec<_>>>()
                .stage("evolve")?;
            TimeSeriesField::new(snaps).stage("evolve")
        }
        Source::Evolve => {
            let initial = cfg.initial.field(&grid, &mask, cfg.evolve.t_start, base)?;
            let bc = boundary(cfg, &grid)?;
            let ec = EvolveConfig {
                dt: cfg.evolve.dt.map_or(TimeStep::Auto, TimeStep::Fixed),
                snapshot_times: times,
                cfl_safety: cfg.evolve.cfl_safety,
            };
            info!("evolving {} on {} nodes", op.name(), grid.len());
            evolve::run(&initial, &op, &bc, &ec).map_err(|e| match e {
                Error::InvalidField(m) => CliError::config(format!("evolve: {m}")),
                e => CliError::new(ExitStatus::Numerical, "evolve", e.to_string()),
            })
        }
    }
}

fn boundary(cfg: &RunConfig, grid: &matzoh_core::Grid) -> Result<BoundaryCondition, CliError> {
    Ok(match &cfg.bc {
        BcSpec::Frozen {} => BoundaryCondition::Frozen,
        BcSpec::Dirichlet { value } => BoundaryCondition::Dirichlet {
            values: vec![*value; grid.len()],
        },
        BcSpec::Neumann {} => BoundaryCondition::NeumannHomogeneous,
        BcSpec::Exact {} => BoundaryCondition::DirichletTimed(
            cfg.initial
                .exact(grid)
                .ok_or_else(|| CliError::config("bc: initial condition has no closed form"))?,
        ),
    })
}

fn uses_xi(op: &QuasiLinearOperator) -> bool {
    !op.is_heat()
}

/// Fills the invariance section: residual per time, verdict and the
/// determinant lattice. Marks the report `not_invariant` (exit 2) when the
/// gate fails.
pub fn check_invariance(
    series: &TimeSeriesField,
    op: &QuasiLinearOperator,
    cfg: &ClassifyConfig,
    report: &mut Report,
) -> Result<(), CliError> {
    let table = build_eta(series, cfg.n_bins).stage("check-invariance")?;
    let alpha = uses_xi(op).then(|| op.alpha());
    let (sec, warn) = InvarianceSection::compute(&table, cfg.tol_inv, alpha, &cfg.d_test);
    report.warnings.extend(warn);
    info!("max invariance residual {:.3e}", sec.max_residual);
    if sec.invariant {
        report.set_verdict("invariant", ExitStatus::Ok);
    } else {
        report.set_verdict("not_invariant", ExitStatus::NotInvariant);
    }
    report.invariance = Some(sec);
    Ok(())
}

/// Gate plus classification. A failed gate leaves the invariance section in
/// place and returns the `NotInvariant` error; mixed data sets exit code 3.
pub fn classify_series(
    series: &TimeSeriesField,
    op: &QuasiLinearOperator,
    cfg: &ClassifyConfig,
    report: &mut Report,
) -> Result<Branch, CliError> {
    match classify_detailed(series, op, cfg) {
        Ok((c, artifacts)) => {
            if let Some(a) = &artifacts {
                report.invariance = Some(InvarianceSection::from_artifacts(a, cfg.tol_inv, uses_xi(op)));
            }
            let branch = c.branch;
            info!("branch {branch}");
            report.classification = Some(c);
            let status = if branch == Branch::Mixed {
                ExitStatus::Mixed
            } else {
                ExitStatus::Ok
            };
            report.set_verdict(branch.as_str(), status);
            Ok(branch)
        }
        Err(e @ Error::NotInvariant { .. }) => {
            // keep the residuals that failed the gate
            if let Ok(table) = build_eta(series, cfg.n_bins) {
                let alpha = uses_xi(op).then(|| op.alpha());
                let (sec, _) = InvarianceSection::compute(&table, cfg.tol_inv, alpha, &cfg.d_test);
                report.invariance = Some(sec);
            }
            report.set_verdict("not_invariant", ExitStatus::NotInvariant);
            Err(CliError::core("classify", e))
        }
        Err(e) => Err(CliError::core("classify", e)),
    }
}

/// `n` evenly spaced levels strictly inside the range of `phi`.
pub fn default_levels(phi: &ScalarField, n: usize) -> Vec<f64> {
    let (lo, hi) = phi.range();
    (1..=n).map(|k| lo + (hi - lo) * k as f64 / (n + 1) as f64).collect()
}

fn operator_body(op: &QuasiLinearOperator) -> Option<&ConvexBody> {
    match op.kind() {
        OperatorKind::HLaplace { body } => Some(body),
        _ => None,
    }
}

/// Isoparametric residual, surface typing at `levels`, and anisotropic
/// level geometry when a body is known (explicitly or from the operator).
pub fn iso_analysis(
    phi: &ScalarField,
    op: &QuasiLinearOperator,
    body: Option<&ConvexBody>,
    levels: &[f64],
    cfg: &ClassifyConfig,
    report: &mut Report,
) -> Result<bool, CliError> {
    const STAGE: &str = "isoparametric";
    let iso = isoparametric_residual(phi, op, &cfg.iso).stage(STAGE)?;
    let body = body.or(operator_body(op));
    let fields = DerivativeFields::new(phi).stage(STAGE)?;
    let mut surfaces = Vec::new();
    for &s in levels {
        match classify_surface_with(&fields, s, body) {
            Ok(mut r) => {
                r.clusters = finite_clusters(r.clusters);
                info!("level {s}: {}", r.kind.label());
                surfaces.push(r);
            }
            Err(e) => report.warnings.push(format!("surface at level {s}: {e}")),
        }
    }
    let mut geometry = Vec::new();
    if let Some(b) = body {
        let f_fit = fields.fit_energy(b, cfg.iso.n_knots).stage(STAGE)?;
        let g_fit = operator_body(op).map(|_| &iso.g);
        for &s in levels {
            match level_geometry(&fields, s, b, &f_fit, g_fit) {
                Ok(mut g) => {
                    g.clusters = finite_clusters(g.clusters);
                    geometry.push(g);
                }
                Err(e) => report.warnings.push(format!("level geometry at {s}: {e}")),
            }
        }
    }
    let pass = iso.pass;
    report.isoparametric = Some(IsoSection {
        operator: op.name().into(),
        pass,
        tol: cfg.iso.tol_iso,
        f: iso.f,
        g: iso.g,
        euler: iso.euler,
        excluded_nodes: iso.excluded.len(),
        surfaces,
        levels: geometry,
    });
    Ok(pass)
}

pub struct GeodesicRequest<'a> {
    pub seeds: &'a [Vec<f64>],
    pub tau_max: f64,
    pub n_steps: usize,
    /// Trace on `F(phi)` with `2H(D F(phi)) = 1`.
    pub normalize: bool,
    /// Project the seeds onto this level of the traced field first.
    pub level: Option<f64>,
}

/// Traces `gamma' = DH(D phi)` from each seed.
pub fn geodesics(
    phi: &ScalarField,
    body: &ConvexBody,
    req: &GeodesicRequest<'_>,
    report: &mut Report,
) -> Result<(), CliError> {
    const STAGE: &str = "geodesic";
    let dim = phi.grid().dim();
    if let Some(s) = req.seeds.iter().find(|s| s.len() != dim) {
        return Err(CliError::config(format!("seed {s:?} does not have {dim} coordinates")));
    }
    let traced = if req.normalize {
        let f = DerivativeFields::new(phi)
            .and_then(|d| d.fit_energy(body, None))
            .stage(STAGE)?;
        normalize_to_unit_f(phi, &f).stage(STAGE)?
    } else {
        phi.clone()
    };
    let traces = req
        .seeds
        .iter()
        .map(|y| {
            let y = match req.level {
                Some(s) => project_to_level(&traced, y, s)?,
                None => y.clone(),
            };
            geodesic_trace(&traced, &y, body, req.tau_max, req.n_steps)
        })
        .collect::<matzoh_core::Result<Vec<_>>>()
        .stage(STAGE)?;
    let n_trunc = traces.iter().filter(|t| t.truncated).count();
    if n_trunc > 0 {
        report
            .warnings
            .push(format!("{n_trunc} trace(s) left the domain before tau_max"));
    }
    report.geodesics = Some(GeodesicSection {
        tau_max: req.tau_max,
        n_steps: req.n_steps,
        normalized: req.normalize,
        max_straightness: traces.iter().map(|t| t.straightness).fold(0.0, f64::max),
        max_level_rate_error: traces.iter().map(|t| t.level_rate_error).fold(0.0, f64::max),
        parallelism: parallelism(&traces),
        traces,
    });
    Ok(())
}

/// Full pipeline: series → gate → classify → (branch (i)) geometry.
/// Failures are recorded in the report status rather than returned.
pub fn run_pipeline(cfg: &RunConfig, base: &Path) -> Report {
    let mut report = Report::new("run", canonical_hash(cfg));
    if let Err(e) = run_into(cfg, base, &mut report) {
        report.fail(&e);
    }
    report
}

fn run_into(cfg: &RunConfig, base: &Path, report: &mut Report) -> Result<(), CliError> {
    let ccfg = cfg.tolerances.classify_config();
    let series = build_series(cfg, base)?;
    let dim = series.reference().grid().dim();
    let op = cfg.operator.build(dim).stage("config")?;
    let body = cfg.body.as_ref().map(|b| b.build(dim)).transpose().stage("config")?;
    let branch = classify_series(&series, &op, &ccfg, report)?;
    if branch == Branch::Isoparametric {
        let phi = series.reference();
        let levels = cfg
            .analysis
            .levels
            .clone()
            .unwrap_or_else(|| default_levels(phi, cfg.analysis.n_levels));
        iso_analysis(phi, &op, body.as_ref(), &levels, &ccfg, report)?;
    }
    Ok(())
}
