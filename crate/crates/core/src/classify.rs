//! Branch classification of an equipotential-invariant series: the
//! isoparametric branch (`D != 0`), the eigen-split and linear-drift
//! branches (`D = 0`), mixtures of both, and constant data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarField, TimeSeriesField};
use crate::invariance::{
    build_eta, d_test, determinant_d, determinant_xi, eta_noise, eta_partials, residual_of, DTest, DTestConfig,
    Determinant, EtaPartials, EtaTable,
};
use crate::isoparametric::{isoparametric_residual, IsoConfig};
use crate::numeric::{fit_line, fit_through_origin, median, three_point_weights};
use crate::operators::QuasiLinearOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Isoparametric,
    EigenSplit,
    LinearDrift,
    Mixed,
    Constant,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Isoparametric => "isoparametric",
            Self::EigenSplit => "eigen_split",
            Self::LinearDrift => "linear_drift",
            Self::Mixed => "mixed",
            Self::Constant => "constant",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which determinant the classifier works with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeterminantPath {
    /// `D` from `eta` directly (heat operator).
    Heat,
    /// `D_xi` with `xi = eta_s^(alpha+1)`.
    Generic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub n_bins: Option<usize>,
    /// Largest admissible invariance residual.
    pub tol_inv: f64,
    pub d_test: DTestConfig,
    /// `lambda` counts as zero within this many standard errors.
    pub lambda_sigma: f64,
    /// `lambda` counts as zero when `|lambda| (T - tau)` is below this.
    pub lambda_floor: f64,
    /// Largest admissible relative misfit of an affine `eta`.
    pub tol_affine: f64,
    /// A separable run of at least `max(min_interval_bins,
    /// min_interval_fraction * labelled bins)` next to a nonzero `D` makes
    /// the data mixed.
    pub min_interval_bins: usize,
    pub min_interval_fraction: f64,
    /// A bin is confidently separable when `kappa` times its noise stays
    /// below this fraction of the largest significant `|D|`.
    pub separable_detect_ratio: f64,
    pub iso: IsoConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            n_bins: None,
            tol_inv: 1e-2,
            d_test: DTestConfig::default(),
            lambda_sigma: 3.0,
            lambda_floor: 1e-9,
            tol_affine: 1e-3,
            min_interval_bins: 4,
            min_interval_fraction: 0.1,
            separable_detect_ratio: 1e-2,
            iso: IsoConfig {
                exclude_critical: true,
                ..IsoConfig::default()
            },
        }
    }
}

/// Per-time least-squares `eta(s, t) ~ a(t) s + b(t)`, weighted by bin counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineEtaFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Weighted RMS misfit over the range of `eta(., t)`.
    pub residual: Vec<f64>,
}

pub fn fit_affine_eta(table: &EtaTable) -> Result<AffineEtaFit> {
    let mut out = AffineEtaFit {
        a: Vec::with_capacity(table.n_times()),
        b: Vec::with_capacity(table.n_times()),
        residual: Vec::with_capacity(table.n_times()),
    };
    for row in &table.eta {
        let keep: Vec<usize> = (0..row.len()).filter(|&b| !row[b].is_nan()).collect();
        let xs: Vec<f64> = keep.iter().map(|&b| table.s_bins[b]).collect();
        let ys: Vec<f64> = keep.iter().map(|&b| row[b]).collect();
        let ws: Vec<f64> = keep.iter().map(|&b| table.counts[b] as f64).collect();
        let fit = fit_line(&xs, &ys, Some(&ws))
            .ok_or_else(|| Error::InsufficientData("affine fit needs two levels".into()))?;
        let (lo, hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        out.a.push(fit.slope);
        out.b.push(fit.intercept);
        out.residual.push(if hi > lo { fit.rms / (hi - lo) } else { 0.0 });
    }
    Ok(out)
}

/// Time factor `a(t)` fitted to `a' = -(lambda/alpha) a^(alpha+1)`
/// (`a' = -lambda a` when `alpha = 0`), with `a(tau) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeFactorFit {
    /// Slope of `-log a` (`alpha = 0`) or `a^(-alpha) - 1` against `t - tau`.
    pub lambda: f64,
    pub stderr: f64,
    /// `max (T - tau)^2 |y''| w` over interior times, with the linearising
    /// variable `y = log a, w = 1` or `y = a^(-alpha), w = a^alpha / |alpha|`.
    pub ode_residual: f64,
    pub is_zero: bool,
}

impl TimeFactorFit {
    /// Decay rate of `Q phi = -lambda' (phi - mu)`.
    pub fn rate(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.lambda
        } else {
            self.lambda / alpha
        }
    }
}

pub fn fit_time_factor(
    times: &[f64],
    a: &[f64],
    alpha: f64,
    lambda_sigma: f64,
    lambda_floor: f64,
) -> Result<TimeFactorFit> {
    if times.len() != a.len() || times.len() < 3 {
        return Err(Error::TooFewSamples {
            found: times.len().min(a.len()),
            needed: 3,
        });
    }
    if a.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::SignChange);
    }
    let tau = times[0];
    let horizon = times[times.len() - 1] - tau;
    let xs: Vec<f64> = times.iter().map(|t| t - tau).collect();
    let (ys, lin): (Vec<f64>, Vec<f64>) = if alpha == 0.0 {
        a.iter().map(|v| (-v.ln(), v.ln())).unzip()
    } else {
        a.iter().map(|v| (v.powf(-alpha) - 1.0, v.powf(-alpha))).unzip()
    };
    let fit =
        fit_line(&xs, &ys, None).ok_or_else(|| Error::InsufficientData("time factor needs distinct times".into()))?;
    let mut ode: f64 = 0.0;
    for k in 1..times.len() - 1 {
        let (_, w2) = three_point_weights(times[k - 1], times[k], times[k + 1]);
        let ypp = w2[0] * lin[k - 1] + w2[1] * lin[k] + w2[2] * lin[k + 1];
        let w = if alpha == 0.0 {
            1.0
        } else {
            a[k].powf(alpha) / alpha.abs()
        };
        ode = ode.max(horizon * horizon * ypp.abs() * w);
    }
    let is_zero = fit.slope.abs() <= lambda_sigma * fit.slope_stderr || fit.slope.abs() * horizon <= lambda_floor;
    Ok(TimeFactorFit {
        lambda: fit.slope,
        stderr: fit.slope_stderr,
        ode_residual: ode,
        is_zero,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalLabel {
    Isoparametric,
    Separable,
    Undetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelInterval {
    pub lo: f64,
    pub hi: f64,
    pub label: IntervalLabel,
    pub n_bins: usize,
}

/// Median split-branch estimates of `G phi` and `Q phi` at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub s: f64,
    pub f: f64,
    pub g: f64,
    pub n_times: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DTestSummary {
    pub nonzero: bool,
    pub max_normalized: f64,
    pub eta_noise: f64,
    pub n_valid: usize,
    pub n_significant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoSummary {
    pub f_residual: f64,
    pub g_residual: f64,
    pub euler: Option<f64>,
    pub pass: bool,
    pub excluded_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub branch: Branch,
    pub operator: String,
    pub alpha: f64,
    pub tau: f64,
    pub horizon: f64,
    pub n_bins: usize,
    pub times: Vec<f64>,
    pub invariance_residual: Vec<f64>,
    pub max_invariance_residual: f64,
    /// `max |u - eta(phi, t)| / range u(., t)` over interior nodes.
    pub representation_residual: Vec<f64>,
    pub d_test: Option<DTestSummary>,
    pub affine: Option<AffineEtaFit>,
    pub time_factor: Option<TimeFactorFit>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub gamma: Option<f64>,
    /// `||Q phi_l + lambda' phi_l|| / ||lambda' phi_l||` with `phi_l = phi - mu`.
    pub eigen_residual: Option<f64>,
    /// `||Q phi - gamma|| / |gamma|`.
    pub drift_residual: Option<f64>,
    pub intervals: Vec<LevelInterval>,
    pub critical_levels: Vec<f64>,
    pub level_estimates: Vec<LevelEstimate>,
    pub iso: Option<IsoSummary>,
}

/// Intermediate products of a classification.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub profile: ScalarField,
    pub table: EtaTable,
    pub partials: EtaPartials,
    pub determinant: Determinant,
    pub d_test: DTest,
}

pub fn classify(
    series: &TimeSeriesField,
    op: &QuasiLinearOperator,
    cfg: &ClassifyConfig,
) -> Result<ClassificationReport> {
    Ok(classify_detailed(series, op, cfg)?.0)
}

pub fn classify_detailed(
    series: &TimeSeriesField,
    op: &QuasiLinearOperator,
    cfg: &ClassifyConfig,
) -> Result<(ClassificationReport, Option<Artifacts>)> {
    let path = if op.is_heat() {
        DeterminantPath::Heat
    } else {
        DeterminantPath::Generic
    };
    classify_with_path(series, op, cfg, path)
}

pub fn classify_with_path(
    series: &TimeSeriesField,
    op: &QuasiLinearOperator,
    cfg: &ClassifyConfig,
    path: DeterminantPath,
) -> Result<(ClassificationReport, Option<Artifacts>)> {
    let phi = series.reference();
    let times = series.times().to_vec();
    let tau = times[0];
    let horizon = times[times.len() - 1] - tau;
    let alpha = op.alpha();
    let mut report = ClassificationReport {
        branch: Branch::Constant,
        operator: op.name().to_string(),
        alpha,
        tau,
        horizon,
        n_bins: 0,
        times: times.clone(),
        invariance_residual: Vec::new(),
        max_invariance_residual: 0.0,
        representation_residual: Vec::new(),
        d_test: None,
        affine: None,
        time_factor: None,
        lambda: None,
        mu: None,
        gamma: None,
        eigen_residual: None,
        drift_residual: None,
        intervals: Vec::new(),
        critical_levels: Vec::new(),
        level_estimates: Vec::new(),
        iso: None,
    };
    let (lo, hi) = phi.range();
    if !(hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1e-300)) {
        return Ok((report, None));
    }

    let table = build_eta(series, cfg.n_bins)?;
    let residual = residual_of(&table);
    let (kmax, rmax) = residual
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(k, m), (j, &r)| if r > m { (j, r) } else { (k, m) });
    if rmax > cfg.tol_inv {
        return Err(Error::NotInvariant {
            residual: rmax,
            tol: cfg.tol_inv,
            time: times[kmax],
        });
    }
    report.n_bins = table.n_bins();
    report.invariance_residual = residual;
    report.max_invariance_residual = rmax;
    report.representation_residual = verify_representation(series, &table)?;
    report.critical_levels = critical_levels(phi, table.bin_width);

    let (partials, det, dt) = match path {
        DeterminantPath::Heat => {
            let p = eta_partials(&table, None)?;
            let det = determinant_d(&p);
            let dt = d_test(&p, &det, &cfg.d_test, false);
            (p, det, dt)
        }
        DeterminantPath::Generic => {
            let p = eta_partials(&table, Some(alpha))?;
            let det = determinant_xi(&p)?;
            let dt = d_test(&p, &det, &cfg.d_test, true);
            (p, det, dt)
        }
    };
    report.d_test = Some(DTestSummary {
        nonzero: dt.nonzero,
        max_normalized: dt.max_normalized,
        eta_noise: dt.eta_noise,
        n_valid: partials.n_valid(),
        n_significant: dt.significant.iter().flatten().filter(|&&s| s).count(),
    });

    let labels = bin_labels(&table, &partials, &dt, cfg);
    report.intervals = intervals(&table, &labels, &report.critical_levels);

    if dt.nonzero {
        report.level_estimates = level_estimates(&table, &det, &dt);
        let labelled = labels.iter().filter(|l| **l != IntervalLabel::Undetermined).count();
        let need = (cfg.min_interval_bins as f64).max((cfg.min_interval_fraction * labelled as f64).ceil()) as usize;
        report.branch = if longest_run(&labels, IntervalLabel::Separable) >= need {
            Branch::Mixed
        } else {
            Branch::Isoparametric
        };
        if let Ok(r) = isoparametric_residual(phi, op, &cfg.iso) {
            report.iso = Some(IsoSummary {
                f_residual: r.f.residual,
                g_residual: r.g.residual,
                euler: r.euler,
                pass: r.pass,
                excluded_nodes: r.excluded.len(),
            });
        }
    } else {
        let affine = fit_affine_eta(&table)?;
        let sigma = eta_noise(&table.eta);
        let bad = affine.residual.iter().zip(&table.eta).any(|(&r, row)| {
            let (lo, hi) = row
                .iter()
                .filter(|v| !v.is_nan())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let noise = if hi > lo { 10.0 * sigma / (hi - lo) } else { 0.0 };
            r > noise.max(cfg.tol_affine)
        });
        if bad {
            report.branch = Branch::Mixed;
        } else {
            let tf = fit_time_factor(&times, &affine.a, alpha, cfg.lambda_sigma, cfg.lambda_floor)?;
            let (q, degenerate) = op.apply_q_regular(phi)?;
            let nodes: Vec<usize> = phi
                .mask()
                .interior_nodes()
                .into_iter()
                .filter(|i| degenerate.binary_search(i).is_err())
                .collect();
            let xs: Vec<f64> = times.iter().map(|t| t - tau).collect();
            if tf.is_zero {
                let gamma = fit_line(&xs, &affine.b, None).map_or(0.0, |f| f.slope);
                let err = nodes.iter().fold(0.0f64, |m, &i| m.max((q.value(i) - gamma).abs()));
                report.branch = Branch::LinearDrift;
                report.lambda = Some(0.0);
                report.gamma = Some(gamma);
                report.drift_residual = Some(if gamma != 0.0 { err / gamma.abs() } else { err });
            } else {
                let one_minus_a: Vec<f64> = affine.a.iter().map(|a| 1.0 - a).collect();
                let (mu, _) = fit_through_origin(&one_minus_a, &affine.b).unwrap_or((0.0, 0.0));
                let rate = tf.rate(alpha);
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for &i in &nodes {
                    let pl = phi.value(i) - mu;
                    num = num.max((q.value(i) + rate * pl).abs());
                    den = den.max((rate * pl).abs());
                }
                report.branch = Branch::EigenSplit;
                report.lambda = Some(tf.lambda);
                report.mu = Some(mu);
                report.gamma = Some(0.0);
                report.eigen_residual = (den > 0.0).then(|| num / den);
            }
            report.time_factor = Some(tf);
        }
        report.affine = Some(affine);
    }

    let artifacts = Artifacts {
        profile: phi.clone(),
        table,
        partials,
        determinant: det,
        d_test: dt,
    };
    Ok((report, Some(artifacts)))
}

/// Per time, `max |u - eta(phi, t)|` over interior nodes divided by the
/// range of `u(., t)`.
pub fn verify_representation(series: &TimeSeriesField, table: &EtaTable) -> Result<Vec<f64>> {
    let phi = series.reference();
    let nodes = phi.mask().interior_nodes();
    series
        .snapshots()
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let (lo, hi) = u.range();
            let err = nodes.iter().try_fold(0.0f64, |m, &i| {
                let e = table
                    .eval(phi.value(i), k)
                    .ok_or_else(|| Error::InsufficientData("empty eta row".into()))?;
                Ok::<_, Error>(m.max((u.value(i) - e).abs()))
            })?;
            Ok(if hi > lo { err / (hi - lo) } else { err })
        })
        .collect()
}

/// Values of `phi` at interior nodes that are strict local extrema among
/// their axis neighbours, merged when closer than `tol`.
pub fn critical_levels(phi: &ScalarField, tol: f64) -> Vec<f64> {
    let grid = phi.grid();
    let mask = phi.mask();
    let mut levels: Vec<f64> = mask
        .interior_nodes()
        .into_iter()
        .filter_map(|i| {
            let v = phi.value(i);
            let (mut above, mut below) = (true, true);
            for k in 0..grid.dim() {
                for off in [-1, 1] {
                    let j = grid.offset(i, k, off).filter(|&j| mask.is_active(j))?;
                    above &= v > phi.value(j);
                    below &= v < phi.value(j);
                }
            }
            (above || below).then_some(v)
        })
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|b, a| (*b - *a).abs() <= tol);
    levels
}

fn bin_labels(table: &EtaTable, p: &EtaPartials, dt: &DTest, cfg: &ClassifyConfig) -> Vec<IntervalLabel> {
    let nb = table.n_bins();
    let peak = (0..p.valid.len())
        .flat_map(|k| (0..nb).map(move |b| (k, b)))
        .filter(|&(k, b)| dt.significant[k][b])
        .fold(0.0f64, |m, (k, b)| m.max(dt.normalized[k][b].abs()));
    (0..nb)
        .map(|b| {
            if dt.significant_bins[b] {
                return IntervalLabel::Isoparametric;
            }
            let pts: Vec<usize> = (0..p.valid.len()).filter(|&k| p.valid[k][b]).collect();
            if pts.is_empty() {
                return IntervalLabel::Undetermined;
            }
            let sensitivity = pts.iter().fold(0.0f64, |m, &k| {
                m.max(cfg.d_test.kappa * dt.noise[k][b]).max(cfg.d_test.abs_floor)
            });
            if !dt.nonzero || sensitivity <= cfg.separable_detect_ratio * peak {
                IntervalLabel::Separable
            } else {
                IntervalLabel::Undetermined
            }
        })
        .collect()
}

fn longest_run(labels: &[IntervalLabel], which: IntervalLabel) -> usize {
    labels
        .iter()
        .fold((0usize, 0usize), |(best, cur), &l| {
            let cur = if l == which { cur + 1 } else { 0 };
            (best.max(cur), cur)
        })
        .0
}

/// Runs of equal bin labels, split at critical levels.
fn intervals(table: &EtaTable, labels: &[IntervalLabel], critical: &[f64]) -> Vec<LevelInterval> {
    let w = table.bin_width;
    let mut out: Vec<LevelInterval> = Vec::new();
    for (b, &label) in labels.iter().enumerate() {
        let (lo, hi) = (table.s_bins[b] - 0.5 * w, table.s_bins[b] + 0.5 * w);
        if let Some(last) = out.last_mut() {
            let split = critical.iter().any(|&c| c > last.lo && c <= lo);
            if last.label == label && !split {
                last.hi = hi;
                last.n_bins += 1;
                continue;
            }
        }
        out.push(LevelInterval {
            lo,
            hi,
            label,
            n_bins: 1,
        });
    }
    out
}

fn level_estimates(table: &EtaTable, det: &Determinant, dt: &DTest) -> Vec<LevelEstimate> {
    (0..table.n_bins())
        .filter_map(|b| {
            let ks: Vec<usize> = (0..det.d.len()).filter(|&k| dt.significant[k][b]).collect();
            let f: Vec<f64> = ks.iter().map(|&k| det.f[k][b]).filter(|v| v.is_finite()).collect();
            let g: Vec<f64> = ks.iter().map(|&k| det.g[k][b]).filter(|v| v.is_finite()).collect();
            Some(LevelEstimate {
                s: table.s_bins[b],
                f: median(&f)?,
                g: median(&g)?,
                n_times: ks.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainMask, Grid};
    use crate::operators::OperatorKind;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn times(n: usize, t0: f64, t1: f64) -> Vec<f64> {
        (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect()
    }

    fn series(
        lo: &[f64],
        hi: &[f64],
        n: &[usize],
        ts: &[f64],
        u: impl Fn(&[f64], f64) -> f64 + Sync + Send,
    ) -> TimeSeriesField {
        let g = Arc::new(Grid::spanning(lo, hi, n).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        TimeSeriesField::from_fn(g, m, ts, u).unwrap()
    }

    fn heat1() -> QuasiLinearOperator {
        QuasiLinearOperator::heat(1)
    }

    #[test]
    fn sine_mode_is_eigen_split() {
        let ts = times(10, 0.1, 1.0);
        let s = series(&[0.0], &[PI], &[401], &ts, |x, t| (-t).exp() * x[0].sin());
        let r = classify(&s, &heat1(), &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::EigenSplit);
        assert!((r.lambda.unwrap() - 1.0).abs() < 1e-6);
        assert!(r.mu.unwrap().abs() < 1e-6);
        assert!(r.eigen_residual.unwrap() < 1e-4);
        assert!(!r.d_test.unwrap().nonzero);
    }

    #[test]
    fn shifted_mode_recovers_mu() {
        let ts = times(8, 0.0, 0.7);
        let s = series(&[0.0], &[PI], &[401], &ts, |x, t| 0.3 + (-t).exp() * x[0].sin());
        let r = classify(&s, &heat1(), &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::EigenSplit);
        assert!((r.mu.unwrap() - 0.3).abs() < 1e-6);
        assert!((r.lambda.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn drift_is_linear_drift() {
        let ts = times(6, 0.0, 0.5);
        let s = series(&[-1.0, -1.0], &[1.0, 1.0], &[41, 41], &ts, |x, t| t + 0.5 * x[0] * x[0]);
        let op = QuasiLinearOperator::heat(2);
        let r = classify(&s, &op, &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::LinearDrift);
        assert!((r.gamma.unwrap() - 1.0).abs() < 1e-9);
        assert!(r.drift_residual.unwrap() < 1e-9);
    }

    #[test]
    fn gaussian_is_isoparametric() {
        let ts = times(10, 1.0, 1.9);
        let s = series(&[-3.0], &[3.0], &[601], &ts, |x, t| {
            (4.0 * PI * t).powf(-0.5) * (-x[0] * x[0] / (4.0 * t)).exp()
        });
        let r = classify(&s, &heat1(), &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::Isoparametric, "{:?}", r.intervals);
        assert!(r.d_test.as_ref().unwrap().nonzero);
        assert!(!r.critical_levels.is_empty());
        let iso = r.iso.unwrap();
        assert!(iso.f_residual < 1e-2 && iso.g_residual < 1e-2);
        // G phi = |phi'|^2 = phi^2 x^2 / (4 tau^2) with x^2 = -4 tau log(phi sqrt(4 pi tau))
        let mut checked = 0;
        for e in &r.level_estimates {
            let c = (4.0 * PI).sqrt();
            let x2 = -4.0 * (e.s * c).ln();
            if x2 < 1.0 || e.s < 0.02 {
                continue;
            }
            let f = e.s * e.s * x2 / 4.0;
            assert!((e.f - f).abs() <= 0.05 * f, "{} {} {}", e.s, e.f, f);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn two_modes_are_not_invariant() {
        let ts = times(6, 0.5, 1.0);
        let s = series(&[0.0], &[PI], &[201], &ts, |x, t| {
            (-t).exp() * x[0].sin() + (-4.0 * t).exp() * (2.0 * x[0]).sin()
        });
        match classify(&s, &heat1(), &ClassifyConfig::default()) {
            Err(Error::NotInvariant { residual, .. }) => assert!(residual > 0.05),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_data() {
        let ts = times(5, 0.0, 1.0);
        let s = series(&[0.0], &[1.0], &[11], &ts, |_, _| 2.0);
        let r = classify(&s, &heat1(), &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::Constant);
    }

    #[test]
    fn generic_path_matches_heat_path_at_alpha_zero() {
        let ts = times(10, 1.0, 1.9);
        let s = series(&[-3.0], &[3.0], &[301], &ts, |x, t| {
            (4.0 * PI * t).powf(-0.5) * (-x[0] * x[0] / (4.0 * t)).exp()
        });
        let cfg = ClassifyConfig::default();
        let (a, fa) = classify_with_path(&s, &heat1(), &cfg, DeterminantPath::Heat).unwrap();
        let (b, fb) = classify_with_path(&s, &heat1(), &cfg, DeterminantPath::Generic).unwrap();
        assert_eq!(a, b);
        let (fa, fb) = (fa.unwrap(), fb.unwrap());
        for (ra, rb) in fa.determinant.d.iter().zip(&fb.determinant.d) {
            for (x, y) in ra.iter().zip(rb) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }

    #[test]
    fn time_factor_examples() {
        let ts = times(21, 0.0, 1.0);
        for (alpha, lambda) in [(1.0, 3.0), (2.0, -0.5), (0.0, 2.0)] {
            let a: Vec<f64> = ts
                .iter()
                .map(|t| {
                    if alpha == 0.0 {
                        (-lambda * t).exp()
                    } else {
                        (1.0 + lambda * t).powf(-1.0 / alpha)
                    }
                })
                .collect();
            let f = fit_time_factor(&ts, &a, alpha, 3.0, 1e-9).unwrap();
            assert!((f.lambda - lambda).abs() < 1e-6, "{alpha} {}", f.lambda);
            assert!(f.ode_residual < 1e-6, "{alpha} {}", f.ode_residual);
            assert!(!f.is_zero);
        }
        let flat = vec![1.0; ts.len()];
        assert!(fit_time_factor(&ts, &flat, 0.0, 3.0, 1e-9).unwrap().is_zero);
        let neg: Vec<f64> = ts.iter().map(|t| 1.0 - 2.0 * t).collect();
        assert!(matches!(
            fit_time_factor(&ts, &neg, 0.0, 3.0, 1e-9),
            Err(Error::SignChange)
        ));
    }

    #[test]
    fn stationary_affine_profile_under_p_laplace() {
        let ts = times(6, 0.0, 0.5);
        let s = series(&[0.0], &[1.0], &[101], &ts, |x, _| x[0]);
        let op = QuasiLinearOperator::new(1, OperatorKind::PLaplace { p: 3.0 }).unwrap();
        let r = classify(&s, &op, &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::LinearDrift);
        assert!(r.gamma.unwrap().abs() < 1e-12);
    }

    #[test]
    fn half_separable_profile_is_mixed() {
        // eta = a(t) s + c(t) h(s) with h = 0 below 1/2: D = h'' (a c' - a' c)
        let h = |s: f64| if s > 0.5 { (s - 0.5).powi(4) } else { 0.0 };
        let ts = times(10, 0.0, 0.9);
        let s = series(&[0.0], &[1.0], &[801], &ts, move |x, t| {
            (-t).exp() * x[0] + (-3.0 * t).exp() * h(x[0]) - h(x[0])
        });
        let r = classify(&s, &heat1(), &ClassifyConfig::default()).unwrap();
        assert_eq!(r.branch, Branch::Mixed, "{:?}", r.intervals);
        assert!(r
            .intervals
            .iter()
            .any(|i| i.label == IntervalLabel::Separable && i.hi <= 0.55));
        assert!(r
            .intervals
            .iter()
            .any(|i| i.label == IntervalLabel::Isoparametric && i.lo >= 0.45));
    }

    #[test]
    fn branch_labels_serialize_snake_case() {
        assert_eq!(serde_json::to_string(&Branch::EigenSplit).unwrap(), "\"eigen_split\"");
        assert_eq!(Branch::LinearDrift.to_string(), "linear_drift");
    }
}
