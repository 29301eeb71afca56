//! Acceptance suite: one PASS/FAIL line per criterion, with timings.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use matzoh_cli::config::RunConfig;
use matzoh_cli::pipeline::{build_series, run_pipeline};
use matzoh_core::classify::{classify, classify_with_path, fit_time_factor, Branch, ClassifyConfig, DeterminantPath};
use matzoh_core::convex::{BodySpec, ConvexBody};
use matzoh_core::grid::{laplacian, DomainMask, Grid, ScalarField, TimeSeriesField};
use matzoh_core::invariance::{build_eta, d_test, determinant_d, eta_partials, residual_of, DTestConfig, EtaTable};
use matzoh_core::io::save_series;
use matzoh_core::isoparametric::{
    classify_surface, euler_check, geodesic_trace, isoparametric_residual, level_geometry, normalize_to_unit_f,
    parallelism, project_to_level, DerivativeFields, IsoConfig, SurfaceKind,
};
use matzoh_core::operators::{OperatorKind, QuasiLinearOperator};

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, secs: f64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < secs,
        format!("runtime {:.2}s exceeds {secs}s", elapsed.as_secs_f64()),
    )
}

fn config(json: &str) -> RunConfig {
    RunConfig::from_json(json).expect("valid config")
}

fn field(
    lo: &[f64],
    hi: &[f64],
    n: &[usize],
    inside: impl Fn(&[f64]) -> bool,
    f: impl Fn(&[f64]) -> f64 + Sync + Send,
) -> ScalarField {
    let g = Arc::new(Grid::spanning(lo, hi, n).unwrap());
    let m = Arc::new(DomainMask::from_predicate(&g, inside));
    ScalarField::from_fn(g, m, None, f).unwrap()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ellipsoid() -> ConvexBody {
    BodySpec::Ellipsoid {
        a: vec![vec![4.0, 0.0], vec![0.0, 1.0]],
    }
    .build(2)
    .unwrap()
}

fn gauge(x: &[f64]) -> f64 {
    (x[0] * x[0] / 4.0 + x[1] * x[1]).sqrt()
}

fn gauge_annulus() -> ScalarField {
    let g = Arc::new(Grid::with_spacing(&[-4.2, -2.2], &[4.2, 2.2], 0.01).unwrap());
    let m = Arc::new(DomainMask::from_predicate(&g, |x| (1.0..=2.0).contains(&gauge(x))));
    ScalarField::from_fn(g, m, None, gauge).unwrap()
}

fn c1_eigen_split() -> Outcome {
    let start = Instant::now();
    let cfg = config(
        r#"{"grid": {"lo": [0.0], "hi": [3.141592653589793], "points": [401]},
            "initial": {"kind": "eigenmode", "wavenumbers": [1.0]},
            "bc": {"kind": "dirichlet", "value": 0.0},
            "evolve": {"snapshots": {"from": 0.1, "to": 1.0, "count": 10}}}"#,
    );
    let r = run_pipeline(&cfg, Path::new("."));
    let elapsed = start.elapsed();
    let c = r.classification.ok_or(format!("no classification: {:?}", r.status))?;
    let (l, m, e) = (
        c.lambda.unwrap_or(f64::NAN),
        c.mu.unwrap_or(f64::NAN),
        c.eigen_residual.unwrap_or(f64::NAN),
    );
    check(c.branch == Branch::EigenSplit, format!("branch {}", c.branch))?;
    check((l - 1.0).abs() <= 1e-2, format!("lambda {l}"))?;
    check(m.abs() <= 1e-3, format!("mu {m}"))?;
    check(e <= 1e-2, format!("eigen residual {e}"))?;
    within(elapsed, 30.0)?;
    Ok(format!("lambda={l:.6} mu={m:.2e} eigen_residual={e:.2e}"))
}

fn c2_linear_drift() -> Outcome {
    let start = Instant::now();
    let analytic = config(
        r#"{"grid": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0], "points": [41, 41]},
            "initial": {"kind": "affine_drift", "quadratic": [1.0, 0.0]},
            "evolve": {"source": "analytic", "snapshots": {"from": 0.0, "to": 1.0, "count": 11}}}"#,
    );
    let series = build_series(&analytic, Path::new(".")).map_err(|e| e.to_string())?;
    let c = classify(&series, &QuasiLinearOperator::heat(2), &ClassifyConfig::default()).map_err(|e| e.to_string())?;
    let g = c.gamma.unwrap_or(f64::NAN);
    check(c.branch == Branch::LinearDrift, format!("branch {}", c.branch))?;
    check((g - 1.0).abs() <= 1e-6, format!("gamma {g}"))?;
    let w = series.reference();
    let lap = laplacian(w).map_err(|e| e.to_string())?;
    let dw = w
        .mask()
        .interior_nodes()
        .into_iter()
        .map(|i| (lap.value(i) - 1.0).abs())
        .fold(0.0, f64::max);
    check(dw <= 1e-6, format!("|lap w - 1| = {dw}"))?;

    let mut evolved = analytic.clone();
    evolved.evolve.source = matzoh_cli::config::Source::Evolve;
    evolved.bc = matzoh_cli::config::BcSpec::Exact {};
    let series = build_series(&evolved, Path::new(".")).map_err(|e| e.to_string())?;
    let c = classify(&series, &QuasiLinearOperator::heat(2), &ClassifyConfig::default()).map_err(|e| e.to_string())?;
    let ge = c.gamma.unwrap_or(f64::NAN);
    check(c.branch == Branch::LinearDrift, format!("evolved branch {}", c.branch))?;
    check((ge - 1.0).abs() <= 5e-3, format!("evolved gamma {ge}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("gamma={g:.9} |lap w - 1|={dw:.1e} evolved gamma={ge:.6}"))
}

fn c3_gaussian_isoparametric() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (dim, points) in [(1usize, 601usize), (2, 121)] {
        let json = format!(
            r#"{{"grid": {{"lo": {lo:?}, "hi": {hi:?}, "points": {pts:?}}},
                "initial": {{"kind": "gaussian_kernel", "t0": 1.0}},
                "evolve": {{"source": "analytic", "snapshots": {{"from": 0.0, "to": 0.5, "count": 6}}}}}}"#,
            lo = vec![-3.0; dim],
            hi = vec![3.0; dim],
            pts = vec![points; dim],
        );
        let cfg = config(&json);
        let series = build_series(&cfg, Path::new(".")).map_err(|e| e.to_string())?;
        let op = QuasiLinearOperator::heat(dim);
        let c = classify(&series, &op, &ClassifyConfig::default()).map_err(|e| e.to_string())?;
        check(c.branch == Branch::Isoparametric, format!("{dim}D branch {}", c.branch))?;
        let d = c.d_test.ok_or("no D test")?;
        check(d.nonzero, format!("{dim}D D test not significant"))?;
        let phi = series.reference();
        let iso = isoparametric_residual(
            phi,
            &op,
            &IsoConfig {
                exclude_critical: true,
                ..IsoConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        check(
            iso.f.residual <= 1e-2 && iso.g.residual <= 1e-2,
            format!("{dim}D f/g residuals {} {}", iso.f.residual, iso.g.residual),
        )?;
        notes.push(format!(
            "{dim}D: D_max={:.1} f={:.1e} g={:.1e}",
            d.max_normalized, iso.f.residual, iso.g.residual
        ));
        if dim == 2 {
            let (lo, hi) = phi.range();
            let s = 0.5 * (lo + hi);
            let r = classify_surface(phi, s, None).map_err(|e| e.to_string())?;
            check(r.kind == SurfaceKind::Sphere, format!("surface {}", r.kind.label()))?;
            let err = norm(r.center.as_deref().unwrap_or(&[f64::NAN, f64::NAN]));
            let h = phi.grid().min_spacing();
            check(err <= 2.0 * h, format!("centre error {err}"))?;
            notes.push(format!("sphere centre error {err:.1e}"));
        }
    }
    within(start.elapsed(), 60.0)?;
    Ok(notes.join("; "))
}

fn exact_table(times: &[f64], s: &[f64], eta: impl Fn(f64, f64) -> f64) -> EtaTable {
    let tau = times[0];
    EtaTable {
        s_bins: s.to_vec(),
        bin_width: s[1] - s[0],
        times: times.to_vec(),
        eta: times
            .iter()
            .map(|&t| s.iter().map(|&v| eta(v, t - tau)).collect())
            .collect(),
        spread: vec![vec![0.0; s.len()]; times.len()],
        counts: vec![10; s.len()],
        ranges: times
            .iter()
            .map(|&t| eta(s[s.len() - 1], t - tau) - eta(s[0], t - tau))
            .collect(),
    }
}

fn c4_determinant_dichotomy() -> Outcome {
    let times: Vec<f64> = (0..11).map(|k| 0.1 * k as f64).collect();
    let s: Vec<f64> = (0..50).map(|b| -1.0 + 2.0 * (b as f64 + 0.5) / 50.0).collect();
    let mut maxes = Vec::new();
    for table in [
        exact_table(&times, &s, |s, dt| (-dt).exp() * s),
        exact_table(&times, &s, |s, dt| s + dt),
    ] {
        let p = eta_partials(&table, None).map_err(|e| e.to_string())?;
        let det = determinant_d(&p);
        let m = p.valid_points().map(|(k, b)| det.d[k][b].abs()).fold(0.0, f64::max);
        check(p.n_valid() > 0, "empty lattice")?;
        check(m <= 1e-10, format!("|D| = {m}"))?;
        maxes.push(m);
    }
    let ts: Vec<f64> = (0..6).map(|k| 1.0 + 0.1 * k as f64).collect();
    let g = Arc::new(Grid::spanning(&[-3.0], &[3.0], &[601]).unwrap());
    let m = Arc::new(DomainMask::full(&g));
    let series = TimeSeriesField::from_fn(g, m, &ts, |x, t| {
        (4.0 * PI * t).powf(-0.5) * (-x[0] * x[0] / (4.0 * t)).exp()
    })
    .map_err(|e| e.to_string())?;
    let table = build_eta(&series, None).map_err(|e| e.to_string())?;
    let p = eta_partials(&table, None).map_err(|e| e.to_string())?;
    let det = determinant_d(&p);
    let dt = d_test(&p, &det, &DTestConfig::default(), false);
    check(dt.nonzero, "Gaussian D test not significant")?;
    Ok(format!(
        "|D| exponential {:.1e}, drift {:.1e}; Gaussian max normalized D {:.1}",
        maxes[0], maxes[1], dt.max_normalized
    ))
}

fn c5_time_factor() -> Outcome {
    let ts: Vec<f64> = (0..21).map(|k| 0.05 * k as f64).collect();
    let mut notes = Vec::new();
    for (alpha, lambda) in [(1.0, 3.0), (2.0, -0.5), (0.0, 2.0)] {
        let a: Vec<f64> = ts
            .iter()
            .map(|t| {
                if alpha == 0.0 {
                    (-lambda * t).exp()
                } else {
                    (1.0f64 + lambda * t).powf(-1.0 / alpha)
                }
            })
            .collect();
        let f = fit_time_factor(&ts, &a, alpha, 3.0, 1e-9).map_err(|e| e.to_string())?;
        check(
            (f.lambda - lambda).abs() <= 1e-6,
            format!("alpha {alpha}: lambda {}", f.lambda),
        )?;
        check(
            f.ode_residual <= 1e-6,
            format!("alpha {alpha}: ODE residual {}", f.ode_residual),
        )?;
        notes.push(format!(
            "({alpha},{lambda}): err {:.1e} ode {:.1e}",
            (f.lambda - lambda).abs(),
            f.ode_residual
        ));
    }
    Ok(notes.join("; "))
}

fn c6_isoparametric_catalog() -> Outcome {
    let heat = QuasiLinearOperator::heat(3);
    let cfg = IsoConfig::default();
    let sphere = field(
        &[-1.5; 3],
        &[1.5; 3],
        &[61; 3],
        |x| (0.5..=1.5).contains(&norm(x)),
        norm,
    );
    let cylinder = field(
        &[-1.5; 3],
        &[1.5; 3],
        &[61; 3],
        |x| (0.5..=1.5).contains(&norm(&x[..2])),
        |x| norm(&x[..2]),
    );
    let e = [0.48, 0.6, 0.64];
    let plane = field(
        &[0.0; 3],
        &[1.0; 3],
        &[21; 3],
        |_| true,
        move |x| x[0] * e[0] + x[1] * e[1] + x[2] * e[2],
    );
    let cases = [
        ("sphere", sphere, 1.0, SurfaceKind::Sphere),
        ("cylinder", cylinder, 1.0, SurfaceKind::SphericalCylinder(1)),
        ("plane", plane, 0.8, SurfaceKind::Hyperplane),
    ];
    let mut notes = Vec::new();
    for (name, phi, level, kind) in cases {
        let r = isoparametric_residual(&phi, &heat, &cfg).map_err(|e| e.to_string())?;
        check(
            r.f.residual <= 1e-3 && r.g.residual <= 1e-3,
            format!("{name}: residuals {} {}", r.f.residual, r.g.residual),
        )?;
        let s = classify_surface(&phi, level, None).map_err(|e| e.to_string())?;
        check(s.kind == kind, format!("{name}: surface {}", s.kind.label()))?;
        notes.push(format!(
            "{name}: {} f={:.1e} g={:.1e}",
            s.kind.label(),
            r.f.residual,
            r.g.residual
        ));
    }
    Ok(notes.join("; "))
}

fn c7_anisotropic_identities() -> Outcome {
    let start = Instant::now();
    let phi = gauge_annulus();
    let body = ellipsoid();
    let op = QuasiLinearOperator::new(2, OperatorKind::HLaplace { body: body.clone() }).map_err(|e| e.to_string())?;
    let euler = euler_check(&body, &matzoh_core::convex::unit_directions(2, 256)).map_err(|e| e.to_string())?;
    check(euler <= 1e-12, format!("Euler {euler}"))?;
    let iso = isoparametric_residual(&phi, &op, &IsoConfig::default()).map_err(|e| e.to_string())?;
    let fields = DerivativeFields::new(&phi).map_err(|e| e.to_string())?;
    let energy = fields.fit_energy(&body, None).map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 4];
    let mut rel = 0.0f64;
    for s in [1.25, 1.5, 1.75] {
        let g = level_geometry(&fields, s, &body, &energy, Some(&iso.g)).map_err(|e| e.to_string())?;
        let ids = g.identities;
        worst[0] = worst[0].max(ids[0].max(ids[1]));
        worst[1] = worst[1].max(ids[2].max(g.shape_restriction));
        worst[2] = worst[2].max(g.m_vs_trace);
        rel = rel.max(g.m_rel_std.unwrap_or(f64::INFINITY));
        worst[3] = worst[3].max(g.n_points as f64);
    }
    check(worst[0] <= 1e-4, format!("identity residual {}", worst[0]))?;
    check(worst[1] <= 1e-4, format!("tangential residual {}", worst[1]))?;
    check(worst[2] <= 1e-3, format!("M vs trace {}", worst[2]))?;
    check(rel <= 1e-2, format!("std(M)/|M| {rel}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "euler={euler:.1e} identities={:.1e} tangential={:.1e} M-trace={:.1e} std/M={rel:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn c8_geodesics() -> Outcome {
    let phi = gauge_annulus();
    let body = ellipsoid();
    let f = DerivativeFields::new(&phi)
        .and_then(|d| d.fit_energy(&body, None))
        .map_err(|e| e.to_string())?;
    let psi = normalize_to_unit_f(&phi, &f).map_err(|e| e.to_string())?;
    let traces = (0..20)
        .map(|k| {
            let th = 2.0 * PI * (k as f64 + 0.25) / 20.0;
            let y = project_to_level(&psi, &[3.0 * th.cos(), 1.5 * th.sin()], 1.5)?;
            geodesic_trace(&psi, &y, &body, 0.3, 60)
        })
        .collect::<matzoh_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    check(traces.iter().all(|t| !t.truncated), "a trace left the domain")?;
    let straight = traces.iter().map(|t| t.straightness).fold(0.0, f64::max);
    let rate = traces.iter().map(|t| t.level_rate_error).fold(0.0, f64::max);
    let par = parallelism(&traces);
    check(straight <= 1e-6, format!("straightness {straight}"))?;
    check(rate <= 1e-3, format!("level rate {rate}"))?;
    check(par <= 1e-4, format!("parallelism {par}"))?;
    Ok(format!(
        "straightness={straight:.1e} level_rate={rate:.1e} parallelism={par:.1e}"
    ))
}

fn c9_reductions() -> Outcome {
    let f = field(
        &[0.2, 0.2],
        &[1.0, 1.0],
        &[41, 41],
        |_| true,
        |x| (x[0] * x[0] + 2.0 * x[1]).sin() + x[0],
    );
    let heat = QuasiLinearOperator::heat(2);
    let q_heat = heat.apply_q(&f).map_err(|e| e.to_string())?;
    let ball = QuasiLinearOperator::new(
        2,
        OperatorKind::HLaplace {
            body: ConvexBody::euclidean_ball(2),
        },
    )
    .map_err(|e| e.to_string())?;
    check(
        ball.apply_q(&f).map_err(|e| e.to_string())? == q_heat,
        "ball h-Laplace differs from heat",
    )?;
    let np = QuasiLinearOperator::new(2, OperatorKind::NormalizedPLaplace { p: 2.0 }).map_err(|e| e.to_string())?;
    let q_np = np.apply_q(&f).map_err(|e| e.to_string())?;
    let dev = q_np
        .values()
        .iter()
        .zip(q_heat.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(dev <= 1e-12, format!("normalized p=2 deviates by {dev}"))?;

    let ts: Vec<f64> = (0..10).map(|k| 1.0 + 0.1 * k as f64).collect();
    let g = Arc::new(Grid::spanning(&[-3.0], &[3.0], &[301]).unwrap());
    let m = Arc::new(DomainMask::full(&g));
    let series = TimeSeriesField::from_fn(g, m, &ts, |x, t| {
        (4.0 * PI * t).powf(-0.5) * (-x[0] * x[0] / (4.0 * t)).exp()
    })
    .map_err(|e| e.to_string())?;
    let heat1 = QuasiLinearOperator::heat(1);
    let cfg = ClassifyConfig::default();
    let (a, _) = classify_with_path(&series, &heat1, &cfg, DeterminantPath::Heat).map_err(|e| e.to_string())?;
    let (b, _) = classify_with_path(&series, &heat1, &cfg, DeterminantPath::Generic).map_err(|e| e.to_string())?;
    check(a == b, "generic path differs from heat path")?;
    Ok(format!(
        "ball h-Laplace bitwise; normalized p=2 max dev {dev:.1e}; paths equal ({})",
        a.branch
    ))
}

fn c10_negative_control() -> Outcome {
    let ts: Vec<f64> = (0..11).map(|k| 0.1 * k as f64).collect();
    let g = Arc::new(Grid::spanning(&[0.0], &[PI], &[401]).unwrap());
    let m = Arc::new(DomainMask::full(&g));
    let series = TimeSeriesField::from_fn(g, m, &ts, |x, t| {
        (-t).exp() * x[0].sin() + (-4.0 * t).exp() * (2.0 * x[0]).sin()
    })
    .map_err(|e| e.to_string())?;
    let table = build_eta(&series, None).map_err(|e| e.to_string())?;
    let res = residual_of(&table);
    let late = ts
        .iter()
        .zip(&res)
        .filter(|(t, _)| **t >= 0.5 - 1e-12)
        .map(|(_, &r)| r)
        .fold(f64::INFINITY, f64::min);
    check(late > 0.05, format!("min residual for t >= 0.5 is {late}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_series(dir.path(), &series).map_err(|e| e.to_string())?;
    let status = Command::new(env!("CARGO_BIN_EXE_matzoh"))
        .arg("classify")
        .arg("--series")
        .arg(dir.path())
        .arg("--report")
        .arg(dir.path().join("report.json"))
        .output()
        .map_err(|e| e.to_string())?;
    let code = status.status.code();
    check(code == Some(2), format!("exit code {code:?}"))?;
    Ok(format!("min residual for t >= 0.5: {late:.3}; classify exit code 2"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("branch (ii) eigen split recovery", c1_eigen_split),
        ("branch (iii) linear drift recovery", c2_linear_drift),
        ("branch (i) Gaussian detection", c3_gaussian_isoparametric),
        ("determinant dichotomy", c4_determinant_dichotomy),
        ("quasi-linear time factor", c5_time_factor),
        ("isoparametric catalog", c6_isoparametric_catalog),
        ("anisotropic identity suite", c7_anisotropic_identities),
        ("geodesics are parallel", c8_geodesics),
        ("reduction regressions", c9_reductions),
        ("negative control", c10_negative_control),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({secs:.2}s) {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({secs:.2}s) {why}", k + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
