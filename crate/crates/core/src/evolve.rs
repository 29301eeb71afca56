//! Explicit forward-Euler integration of `u_t = Q u`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{BoundaryStencil, NodeKind, ScalarField, TimeSeriesField};
use crate::operators::QuasiLinearOperator;
use crate::par;

/// Boundary drive `g(x, t)` for manufactured time-dependent Dirichlet data.
pub type TimeProfile = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum BoundaryCondition {
    /// Fixed values at boundary nodes (one entry per grid node; only boundary
    /// entries are read).
    Dirichlet { values: Vec<f64> },
    /// Boundary values `g(x, t)` evaluated at the new time after each step.
    DirichletTimed(TimeProfile),
    /// `u_nu = 0` through mirrored ghost values.
    NeumannHomogeneous,
    /// Boundary values of the initial field held fixed.
    Frozen,
}

impl fmt::Debug for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dirichlet { values } => f.debug_struct("Dirichlet").field("len", &values.len()).finish(),
            Self::DirichletTimed(_) => f.write_str("DirichletTimed(..)"),
            Self::NeumannHomogeneous => f.write_str("NeumannHomogeneous"),
            Self::Frozen => f.write_str("Frozen"),
        }
    }
}

impl BoundaryCondition {
    fn validate(&self, field: &ScalarField) -> Result<()> {
        if let Self::Dirichlet { values } = self {
            if values.len() != field.grid().len() {
                return Err(Error::InvalidField(format!(
                    "dirichlet data has {} entries, grid has {}",
                    values.len(),
                    field.grid().len()
                )));
            }
            let mask = field.mask();
            if let Some(i) = (0..values.len()).find(|&i| mask.kind(i) == NodeKind::Boundary && !values[i].is_finite()) {
                return Err(Error::InvalidField(format!("non-finite dirichlet value at node {i}")));
            }
        }
        Ok(())
    }

    fn stencil_mode(&self) -> BoundaryStencil {
        match self {
            Self::NeumannHomogeneous => BoundaryStencil::Mirror,
            _ => BoundaryStencil::OneSided,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeStep {
    /// `cfl_safety` times the stability bound, re-evaluated every step.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveConfig {
    pub dt: TimeStep,
    pub snapshot_times: Vec<f64>,
    pub cfl_safety: f64,
}

impl EvolveConfig {
    pub fn new(snapshot_times: Vec<f64>) -> Self {
        Self {
            dt: TimeStep::Auto,
            snapshot_times,
            cfl_safety: 0.9,
        }
    }
}

/// Stability bound `min h^2 / (2 N Lambda)` of the explicit scheme, with
/// `Lambda` the largest coefficient eigenvalue over interior nodes.
pub fn cfl_bound(op: &QuasiLinearOperator, field: &ScalarField) -> Result<f64> {
    let lambda = op.max_coefficient_eigenvalue(field)?;
    if !(lambda > 0.0) {
        return Err(Error::DegenerateOperator);
    }
    let h = field.grid().min_spacing();
    Ok(h * h / (2.0 * field.grid().dim() as f64 * lambda))
}

pub fn cfl_dt(op: &QuasiLinearOperator, field: &ScalarField, safety: f64) -> Result<f64> {
    Ok(safety * cfl_bound(op, field)?)
}

/// One forward-Euler step `u <- u + dt Q u`; the result carries time
/// `t + dt` when the input is tagged.
pub fn step(field: &ScalarField, op: &QuasiLinearOperator, bc: &BoundaryCondition, dt: f64) -> Result<ScalarField> {
    bc.validate(field)?;
    let bound = cfl_bound(op, field)?;
    check_dt(dt, bound)?;
    advance(field, op, bc, dt, 1)
}

fn check_dt(dt: f64, bound: f64) -> Result<()> {
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, bound });
    }
    Ok(())
}

fn advance(
    field: &ScalarField,
    op: &QuasiLinearOperator,
    bc: &BoundaryCondition,
    dt: f64,
    step_index: usize,
) -> Result<ScalarField> {
    let t_new = field.time().map(|t| t + dt);
    let st = field.stencil(bc.stencil_mode());
    let grid = field.grid();
    let mask = field.mask();
    let u = field.values();
    let results: Vec<std::result::Result<f64, usize>> = par::map_indexed(grid.len(), |i| match mask.kind(i) {
        NodeKind::Exterior => Ok(0.0),
        NodeKind::Interior => op.q_at(&st, i).map(|q| u[i] + dt * q).map_err(|_| i),
        NodeKind::Boundary => Ok(match bc {
            BoundaryCondition::Dirichlet { values } => values[i],
            BoundaryCondition::DirichletTimed(g) => g(&grid.coord(i), t_new.unwrap_or(dt)),
            BoundaryCondition::NeumannHomogeneous => u[i] + dt * op.q_at(&st, i).unwrap_or(0.0),
            BoundaryCondition::Frozen => u[i],
        }),
    });
    let mut values = Vec::with_capacity(results.len());
    let mut degenerate = Vec::new();
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(i) => {
                degenerate.push(i);
                values.push(0.0);
            }
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateGradient { nodes: degenerate });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: step_index });
    }
    Ok(field.with_values(values)?.with_time(t_new))
}

/// Integrates from the initial field's time (0 when untagged) and samples
/// the solution at `config.snapshot_times` by linear interpolation between
/// steps.
pub fn run(
    initial: &ScalarField,
    op: &QuasiLinearOperator,
    bc: &BoundaryCondition,
    config: &EvolveConfig,
) -> Result<TimeSeriesField> {
    bc.validate(initial)?;
    if !(config.cfl_safety > 0.0 && config.cfl_safety <= 1.0) {
        return Err(Error::InvalidField(format!(
            "cfl_safety must lie in (0, 1], got {}",
            config.cfl_safety
        )));
    }
    let snaps = &config.snapshot_times;
    let t0 = initial.time().unwrap_or(0.0);
    if snaps.is_empty()
        || snaps.iter().any(|t| !t.is_finite())
        || snaps.windows(2).any(|w| !(w[1] > w[0]))
        || snaps[0] < t0
    {
        return Err(Error::InvalidField(
            "snapshot times must be finite, strictly increasing and not before the initial time".into(),
        ));
    }

    let heat_bound = if op.is_heat() {
        Some(cfl_bound(op, initial)?)
    } else {
        None
    };
    let mut cur = initial.clone().with_time(Some(t0));
    let mut t = t0;
    let mut out = Vec::with_capacity(snaps.len());
    let mut k = 0;
    while k < snaps.len() && snaps[k] <= t0 {
        out.push(cur.clone().with_time(Some(snaps[k])));
        k += 1;
    }
    let mut n = 0usize;
    while k < snaps.len() {
        let bound = match heat_bound {
            Some(b) => b,
            None => cfl_bound(op, &cur)?,
        };
        let dt = match config.dt {
            TimeStep::Auto => config.cfl_safety * bound,
            TimeStep::Fixed(dt) => {
                check_dt(dt, bound)?;
                dt
            }
        };
        n += 1;
        let next = advance(&cur, op, bc, dt, n)?;
        let t_next = t + dt;
        while k < snaps.len() && snaps[k] <= t_next {
            let theta = (snaps[k] - t) / dt;
            let values = cur
                .values()
                .iter()
                .zip(next.values())
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect();
            out.push(cur.with_values(values)?.with_time(Some(snaps[k])));
            k += 1;
        }
        cur = next;
        t = t_next;
    }
    TimeSeriesField::with_times(out, snaps.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainMask, Grid};
    use crate::operators::OperatorKind;
    use std::f64::consts::PI;

    fn line(lo: f64, hi: f64, n: usize) -> (Arc<Grid>, Arc<DomainMask>) {
        let g = Arc::new(Grid::spanning(&[lo], &[hi], &[n]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        (g, m)
    }

    fn zero_dirichlet(f: &ScalarField) -> BoundaryCondition {
        BoundaryCondition::Dirichlet {
            values: vec![0.0; f.grid().len()],
        }
    }

    #[test]
    fn cfl_examples() {
        let (g, m) = line(0.0, 1.0, 101);
        let f = ScalarField::from_fn(g, m, None, |x| x[0]).unwrap();
        let heat = QuasiLinearOperator::heat(1);
        assert!((cfl_dt(&heat, &f, 1.0).unwrap() - 5e-5).abs() < 1e-15);

        let g2 = Arc::new(Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[11, 11]).unwrap());
        let m2 = Arc::new(DomainMask::full(&g2));
        let f2 = ScalarField::from_fn(g2, m2, None, |x| 0.5 * x[0] + 0.2 * x[1]).unwrap();
        let h = 0.1f64;
        assert!((cfl_bound(&QuasiLinearOperator::heat(2), &f2).unwrap() - h * h / 4.0).abs() < 1e-15);

        // p = 3, |Du| = sqrt(0.29): Lambda = 2 |Du|
        let p3 = QuasiLinearOperator::new(2, OperatorKind::PLaplace { p: 3.0 }).unwrap();
        let lam = 2.0 * (0.29f64).sqrt();
        let b = cfl_bound(&p3, &f2).unwrap();
        assert!((b - h * h / (4.0 * lam)).abs() < 1e-12);
    }

    #[test]
    fn constant_is_a_fixed_point() {
        let (g, m) = line(0.0, 1.0, 21);
        let c = 0.731;
        let f = ScalarField::from_fn(g, m, None, |_| c).unwrap();
        let bc = BoundaryCondition::Dirichlet { values: vec![c; 21] };
        let s = run(
            &f,
            &QuasiLinearOperator::heat(1),
            &bc,
            &EvolveConfig::new(vec![0.1, 0.2, 0.3]),
        )
        .unwrap();
        for snap in s.snapshots() {
            assert!(snap.values().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn sine_decays_like_exp() {
        let (g, m) = line(0.0, PI, 201);
        let f = ScalarField::from_fn(g, m, None, |x| x[0].sin()).unwrap();
        let s = run(
            &f,
            &QuasiLinearOperator::heat(1),
            &zero_dirichlet(&f),
            &EvolveConfig::new(vec![0.5, 1.0]),
        )
        .unwrap();
        let last = &s.snapshots()[1];
        let err = (0..201)
            .map(|i| (last.value(i) - (-1.0f64).exp() * last.grid().coord(i)[0].sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-2, "{err}");
        assert_eq!(s.times(), &[0.5, 1.0]);
    }

    #[test]
    fn timed_dirichlet_manufactures_drift() {
        let (g, m) = line(-1.0, 1.0, 81);
        let f = ScalarField::from_fn(g, m, Some(0.0), |x| 0.5 * x[0] * x[0]).unwrap();
        let bc = BoundaryCondition::DirichletTimed(Arc::new(|x, t| t + 0.5 * x[0] * x[0]));
        let s = run(&f, &QuasiLinearOperator::heat(1), &bc, &EvolveConfig::new(vec![0.5])).unwrap();
        let snap = &s.snapshots()[0];
        for i in 0..81 {
            let x = snap.grid().coord(i)[0];
            assert!((snap.value(i) - (0.5 + 0.5 * x * x)).abs() <= 5e-3);
        }
    }

    #[test]
    fn maximum_principle() {
        let g = Arc::new(Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[21, 21]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let f = ScalarField::from_fn(g, m, None, |x| (7.0 * x[0]).sin() * (3.0 * x[1]).cos()).unwrap();
        let (lo, hi) = f.range();
        let s = run(
            &f,
            &QuasiLinearOperator::heat(2),
            &BoundaryCondition::Frozen,
            &EvolveConfig::new(vec![0.01, 0.02, 0.05]),
        )
        .unwrap();
        for snap in s.snapshots() {
            let (a, b) = snap.range();
            assert!(a >= lo - 1e-12 && b <= hi + 1e-12);
        }
    }

    #[test]
    fn neumann_conserves_mass() {
        let g = Arc::new(Grid::spanning(&[0.0, 0.0], &[1.0, 2.0], &[21, 41]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let f = ScalarField::from_fn(g, m, None, |x| 1.0 + x[0] * x[1] * x[1] + (3.0 * x[0]).sin()).unwrap();
        let m0 = f.mass();
        let abs: f64 = f.active_values().map(f64::abs).sum();
        let s = run(
            &f,
            &QuasiLinearOperator::heat(2),
            &BoundaryCondition::NeumannHomogeneous,
            &EvolveConfig::new(vec![0.05, 0.1]),
        )
        .unwrap();
        for (snap, t) in s.snapshots().iter().zip(s.times()) {
            assert!((snap.mass() - m0).abs() <= 1e-8 * abs * t.max(1.0));
        }
    }

    #[test]
    fn first_order_in_time() {
        let (g, m) = line(0.0, PI, 21);
        let f = ScalarField::from_fn(g, m, None, |x| x[0].sin() + 0.3 * (2.0 * x[0]).sin()).unwrap();
        let at = |dt: f64| {
            let cfg = EvolveConfig {
                dt: TimeStep::Fixed(dt),
                snapshot_times: vec![0.2],
                cfl_safety: 0.9,
            };
            run(&f, &QuasiLinearOperator::heat(1), &zero_dirichlet(&f), &cfg)
                .unwrap()
                .snapshots()[0]
                .values()
                .to_vec()
        };
        let (a, b, c) = (at(0.01), at(0.005), at(0.0025));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let ratio = d(&a, &b) / d(&b, &c);
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rejects_large_fixed_dt() {
        let (g, m) = line(0.0, 1.0, 11);
        let f = ScalarField::from_fn(g, m, None, |x| x[0]).unwrap();
        let r = step(&f, &QuasiLinearOperator::heat(1), &BoundaryCondition::Frozen, 0.01);
        assert!(matches!(r, Err(Error::CflViolation { .. })));
    }

    #[test]
    fn non_finite_reports_step() {
        let (g, m) = line(0.0, 1.0, 11);
        let f = ScalarField::from_fn(g, m, Some(0.0), |x| x[0]).unwrap();
        let bc = BoundaryCondition::DirichletTimed(Arc::new(|_, t| if t > 0.0 { f64::NAN } else { 0.0 }));
        let r = run(&f, &QuasiLinearOperator::heat(1), &bc, &EvolveConfig::new(vec![0.1]));
        assert!(matches!(r, Err(Error::NonFinite { step: 1 })));
    }

    #[test]
    fn degenerate_p_laplace_is_rejected() {
        let (g, m) = line(-1.0, 1.0, 21);
        let f = ScalarField::from_fn(g, m, None, |x| x[0] * x[0]).unwrap();
        let op = QuasiLinearOperator::new(1, OperatorKind::PLaplace { p: 3.0 }).unwrap();
        let r = run(&f, &op, &BoundaryCondition::Frozen, &EvolveConfig::new(vec![0.01]));
        assert!(matches!(r, Err(Error::DegenerateGradient { .. })));
    }

    #[test]
    fn schedules_give_identical_runs() {
        let g = Arc::new(Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[31, 31]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let f = ScalarField::from_fn(g, m, None, |x| 1.0 + x[0] + 0.5 * (x[1] * 4.0).sin()).unwrap();
        let op = QuasiLinearOperator::new(2, OperatorKind::PLaplace { p: 2.5 }).unwrap();
        let cfg = EvolveConfig::new(vec![0.002, 0.004]);
        par::set_execution(par::Execution::Sequential);
        let a = run(&f, &op, &BoundaryCondition::Frozen, &cfg).unwrap();
        par::set_execution(par::Execution::Parallel);
        let b = run(&f, &op, &BoundaryCondition::Frozen, &cfg).unwrap();
        assert_eq!(a.snapshots(), b.snapshots());
    }
}
