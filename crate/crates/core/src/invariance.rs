//! Level-profile reconstruction `u(x, t) = eta(phi(x), t)` and the
//! determinants that separate isoparametric from separable behaviour.

use crate::error::{Error, Result};
use crate::grid::TimeSeriesField;
use crate::numeric::{median, three_point_weights};
use crate::par;

pub const DEFAULT_MAX_BINS: usize = 256;
pub const MAX_EMPTY_FRACTION: f64 = 0.2;
pub const MIN_SNAPSHOTS: usize = 4;

/// `eta(s, t)` sampled at equal-width bins of the reference field.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaTable {
    /// Bin centres, increasing.
    pub s_bins: Vec<f64>,
    pub bin_width: f64,
    pub times: Vec<f64>,
    /// `eta[k][b]` at time `times[k]`; NaN for empty bins.
    pub eta: Vec<Vec<f64>>,
    /// Max minus min of the in-bin residuals about the local fit of `u`
    /// against `phi`; zero for empty bins.
    pub spread: Vec<Vec<f64>>,
    /// Nodes per bin.
    pub counts: Vec<usize>,
    /// `max - min` of `u(., t)` over active nodes.
    pub ranges: Vec<f64>,
}

impl EtaTable {
    pub fn n_bins(&self) -> usize {
        self.s_bins.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn tau(&self) -> f64 {
        self.times[0]
    }

    /// Increasing in `s` at every time over non-empty bins.
    pub fn is_monotone(&self) -> bool {
        self.eta.iter().all(|row| {
            let v: Vec<f64> = row.iter().copied().filter(|x| !x.is_nan()).collect();
            v.windows(2).all(|w| w[1] > w[0])
        })
    }

    /// Linear interpolation of `eta(., times[k])` between non-empty bins.
    pub fn eval(&self, s: f64, k: usize) -> Option<f64> {
        let row = &self.eta[k];
        let pts: Vec<(f64, f64)> = self
            .s_bins
            .iter()
            .zip(row)
            .filter(|(_, e)| !e.is_nan())
            .map(|(&s, &e)| (s, e))
            .collect();
        match pts.len() {
            0 => None,
            1 => Some(pts[0].1),
            _ => {
                let j = pts.partition_point(|p| p.0 <= s).clamp(1, pts.len() - 1);
                let (s0, e0) = pts[j - 1];
                let (s1, e1) = pts[j];
                Some(e0 + (e1 - e0) * (s - s0) / (s1 - s0))
            }
        }
    }
}

/// Bin count used when none is requested: `ceil(sqrt(#interior))` capped
/// at 256, reduced while more than 20% of the bins would be empty.
pub fn default_bins(series: &TimeSeriesField) -> usize {
    let phi = series.reference();
    let active: Vec<f64> = phi.active_values().collect();
    choose_bins(&active, phi.mask().interior_nodes().len())
}

/// `ceil(sqrt(base))` clamped to `[4, 256]`, shrunk by 10% steps while more
/// than 20% of the equal-width bins over `values` would be empty.
pub fn choose_bins(values: &[f64], base: usize) -> usize {
    let mut n = ((base.max(1) as f64).sqrt().ceil() as usize).clamp(4, DEFAULT_MAX_BINS);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    while n > 4 {
        let counts = bin_counts(values, lo, hi, n);
        let empty = counts.iter().filter(|&&c| c == 0).count();
        if (empty as f64) <= MAX_EMPTY_FRACTION * n as f64 {
            break;
        }
        n = (n * 9 / 10).max(4);
    }
    n
}

pub(crate) fn bin_of(v: f64, lo: f64, width: f64, n: usize) -> usize {
    (((v - lo) / width).floor().max(0.0) as usize).min(n - 1)
}

fn bin_counts(values: &[f64], lo: f64, hi: f64, n: usize) -> Vec<usize> {
    let w = (hi - lo) / n as f64;
    let mut c = vec![0; n];
    if w > 0.0 {
        for &v in values {
            c[bin_of(v, lo, w, n)] += 1;
        }
    }
    c
}

/// Per-bin summary of `(phi - s_b, u)` pairs at one time.
struct BinFit {
    mean_d: f64,
    mean_u: f64,
    slope: Option<f64>,
}

fn fit_bin(d: &[f64], u: &[f64], width: f64) -> BinFit {
    let n = d.len() as f64;
    let mean_d = d.iter().sum::<f64>() / n;
    let mean_u = u.iter().sum::<f64>() / n;
    let sdd: f64 = d.iter().map(|x| (x - mean_d).powi(2)).sum();
    // a slope is only trusted when phi spreads over a fair part of the bin
    let slope = (sdd / n >= (0.05 * width).powi(2))
        .then(|| d.iter().zip(u).map(|(x, y)| (x - mean_d) * (y - mean_u)).sum::<f64>() / sdd);
    BinFit { mean_d, mean_u, slope }
}

/// Builds the `eta` table: nodes are binned by the reference snapshot and
/// `eta(s_b, t)` is the bin-centre value of a local line of `u(., t)`
/// against `phi` (see [`local_line_profile`]).
pub fn build_eta(series: &TimeSeriesField, n_bins: Option<usize>) -> Result<EtaTable> {
    if series.len() < MIN_SNAPSHOTS {
        return Err(Error::TooFewSamples {
            found: series.len(),
            needed: MIN_SNAPSHOTS,
        });
    }
    let phi = series.reference();
    let (lo, hi) = phi.range();
    let scale = lo.abs().max(hi.abs()).max(1e-300);
    if !(hi - lo > 1e-12 * scale) {
        return Err(Error::InvalidField("reference snapshot is constant".into()));
    }
    let nb = match n_bins {
        Some(n) if n >= 3 => n,
        Some(n) => {
            return Err(Error::InvalidField(format!("need at least 3 bins, got {n}")));
        }
        None => default_bins(series),
    };
    let width = (hi - lo) / nb as f64;
    let s_bins: Vec<f64> = (0..nb).map(|b| lo + (b as f64 + 0.5) * width).collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for i in phi.mask().active_nodes() {
        members[bin_of(phi.value(i), lo, width, nb)].push(i);
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let empty = counts.iter().filter(|&&c| c == 0).count();
    if empty as f64 > MAX_EMPTY_FRACTION * nb as f64 {
        return Err(Error::InsufficientLevelResolution { empty, total: nb });
    }

    let nt = series.len();
    let per_time = par::map_indexed(nt, |k| {
        let u = series.snapshots()[k].values();
        local_line_profile(&members, &s_bins, width, |i| phi.value(i), |i| u[i])
    });
    let (eta, spread): (Vec<_>, Vec<_>) = per_time.into_iter().unzip();
    let ranges = series
        .snapshots()
        .iter()
        .map(|s| {
            let (a, b) = s.range();
            b - a
        })
        .collect();
    Ok(EtaTable {
        s_bins,
        bin_width: width,
        times: series.times().to_vec(),
        eta,
        spread,
        counts,
        ranges,
    })
}

/// Value at each bin centre of a least-squares line of `u` against `phi`
/// over the bin's members, with the max-minus-min of the residuals about
/// that line. Bins whose `phi` values are too concentrated for a line
/// borrow the slope of their neighbours; empty bins give NaN and zero.
pub(crate) fn local_line_profile(
    members: &[Vec<usize>],
    s_bins: &[f64],
    width: f64,
    phi: impl Fn(usize) -> f64,
    u: impl Fn(usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let nb = s_bins.len();
    let fits: Vec<Option<BinFit>> = (0..nb)
        .map(|b| {
            let m = &members[b];
            if m.is_empty() {
                return None;
            }
            let d: Vec<f64> = m.iter().map(|&i| phi(i) - s_bins[b]).collect();
            let uv: Vec<f64> = m.iter().map(|&i| u(i)).collect();
            Some(fit_bin(&d, &uv, width))
        })
        .collect();
    let mut eta = vec![f64::NAN; nb];
    let mut spread = vec![0.0; nb];
    for b in 0..nb {
        let Some(fit) = &fits[b] else { continue };
        let slope = fit.slope.unwrap_or_else(|| neighbour_slope(&fits, s_bins, b));
        eta[b] = fit.mean_u - slope * fit.mean_d;
        let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &members[b] {
            let r = u(i) - eta[b] - slope * (phi(i) - s_bins[b]);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        spread[b] = rmax - rmin;
    }
    (eta, spread)
}

/// Secant slope through the centroids of the nearest non-empty bins.
fn neighbour_slope(fits: &[Option<BinFit>], s: &[f64], b: usize) -> f64 {
    let centroid = |j: usize| fits[j].as_ref().map(|f| (s[j] + f.mean_d, f.mean_u));
    let left = (0..b).rev().find_map(centroid);
    let right = (b + 1..fits.len()).find_map(centroid);
    let here = centroid(b);
    let (p, q) = match (left, right) {
        (Some(l), Some(r)) => (l, r),
        (Some(l), None) => (l, here.unwrap()),
        (None, Some(r)) => (here.unwrap(), r),
        (None, None) => return 0.0,
    };
    if q.0 != p.0 {
        (q.1 - p.1) / (q.0 - p.0)
    } else {
        0.0
    }
}

/// Per-time invariance residual: the largest in-bin spread normalised by
/// the range of `u(., t)` (zero when the range vanishes).
pub fn invariance_residual(series: &TimeSeriesField, n_bins: Option<usize>) -> Result<Vec<f64>> {
    Ok(residual_of(&build_eta(series, n_bins)?))
}

pub fn residual_of(table: &EtaTable) -> Vec<f64> {
    table
        .spread
        .iter()
        .zip(&table.ranges)
        .map(|(row, &r)| {
            let m = row.iter().copied().fold(0.0, f64::max);
            if r > 0.0 {
                m / r
            } else {
                0.0
            }
        })
        .collect()
}

/// `xi = eta_s^(alpha+1)` and its partials.
#[derive(Clone, Debug, PartialEq)]
pub struct XiPartials {
    pub alpha: f64,
    pub xi: Vec<Vec<f64>>,
    pub xi_s: Vec<Vec<f64>>,
    pub xi_t: Vec<Vec<f64>>,
    pub xi_st: Vec<Vec<f64>>,
}

/// Finite-difference partials of `eta` on the `(time, bin)` lattice.
/// Entries are meaningful where `valid[k][b]` holds: the bin and both
/// neighbours are non-empty and `k` is an interior time.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaPartials {
    pub s: Vec<f64>,
    pub times: Vec<f64>,
    pub ds: f64,
    pub eta: Vec<Vec<f64>>,
    pub eta_s: Vec<Vec<f64>>,
    pub eta_ss: Vec<Vec<f64>>,
    pub eta_t: Vec<Vec<f64>>,
    pub eta_st: Vec<Vec<f64>>,
    pub eta_tt: Vec<Vec<f64>>,
    pub eta_sst: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    /// Norm of the three-point first-derivative time weights per time.
    pub time_weight_norm: Vec<f64>,
    pub xi: Option<XiPartials>,
}

impl EtaPartials {
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .flat_map(|(k, row)| row.iter().enumerate().filter(|(_, &v)| v).map(move |(b, _)| (k, b)))
    }

    pub fn n_valid(&self) -> usize {
        self.valid_points().count()
    }
}

/// Centred second-order differences in `s` and three-point (possibly
/// non-uniform) differences in `t`; with `alpha` the `xi` family follows by
/// the chain rule.
pub fn eta_partials(table: &EtaTable, alpha: Option<f64>) -> Result<EtaPartials> {
    lattice_partials(&table.s_bins, &table.times, &table.eta, alpha)
}

/// Partials of an arbitrary lattice `eta[k][b]` over equally spaced `s`.
pub fn lattice_partials(s: &[f64], times: &[f64], eta: &[Vec<f64>], alpha: Option<f64>) -> Result<EtaPartials> {
    let nb = s.len();
    let nt = times.len();
    if nb < 3 || nt < 3 {
        return Err(Error::TooFewSamples {
            found: nb.min(nt),
            needed: 3,
        });
    }
    if let Some(a) = alpha {
        if !(a > -1.0) {
            return Err(Error::InvalidOperator(format!("alpha must exceed -1, got {a}")));
        }
    }
    let ds = (s[nb - 1] - s[0]) / (nb - 1) as f64;
    let zeros = || vec![vec![0.0; nb]; nt];
    let (mut e_s, mut e_ss) = (zeros(), zeros());
    let mut s_ok = vec![vec![false; nb]; nt];
    for k in 0..nt {
        for b in 1..nb - 1 {
            let (m, c, p) = (eta[k][b - 1], eta[k][b], eta[k][b + 1]);
            if m.is_nan() || c.is_nan() || p.is_nan() {
                continue;
            }
            e_s[k][b] = (p - m) / (2.0 * ds);
            e_ss[k][b] = (p - 2.0 * c + m) / (ds * ds);
            s_ok[k][b] = true;
        }
    }
    let (mut e_t, mut e_tt, mut e_st, mut e_sst) = (zeros(), zeros(), zeros(), zeros());
    let mut valid = vec![vec![false; nb]; nt];
    let mut wnorm = vec![0.0; nt];
    for k in 1..nt - 1 {
        let (w1, w2) = three_point_weights(times[k - 1], times[k], times[k + 1]);
        wnorm[k] = w1.iter().map(|w| w * w).sum::<f64>().sqrt();
        for b in 1..nb - 1 {
            if !(s_ok[k - 1][b] && s_ok[k][b] && s_ok[k + 1][b]) {
                continue;
            }
            let dt = |f: &[Vec<f64>], w: &[f64; 3]| w[0] * f[k - 1][b] + w[1] * f[k][b] + w[2] * f[k + 1][b];
            e_t[k][b] = dt(eta, &w1);
            e_tt[k][b] = dt(eta, &w2);
            e_st[k][b] = dt(&e_s, &w1);
            e_sst[k][b] = dt(&e_ss, &w1);
            valid[k][b] = true;
        }
    }

    let mut bad_bins: Vec<usize> = Vec::new();
    for k in 0..nt {
        for b in 0..nb {
            if valid[k][b] && !(e_s[k][b] > 0.0) && !bad_bins.contains(&b) {
                bad_bins.push(b);
            }
        }
    }
    if !bad_bins.is_empty() {
        bad_bins.sort_unstable();
        return Err(Error::NonMonotone { bins: bad_bins });
    }

    let xi = alpha.map(|a| {
        let mut x = XiPartials {
            alpha: a,
            xi: zeros(),
            xi_s: zeros(),
            xi_t: zeros(),
            xi_st: zeros(),
        };
        for k in 0..nt {
            for b in 0..nb {
                if !s_ok[k][b] || !(e_s[k][b] > 0.0) {
                    continue;
                }
                let es = e_s[k][b];
                let pa = es.powf(a);
                x.xi[k][b] = es.powf(a + 1.0);
                x.xi_s[k][b] = (a + 1.0) * pa * e_ss[k][b];
                if valid[k][b] {
                    x.xi_t[k][b] = (a + 1.0) * pa * e_st[k][b];
                    x.xi_st[k][b] = (a + 1.0) * (a * es.powf(a - 1.0) * e_st[k][b] * e_ss[k][b] + pa * e_sst[k][b]);
                }
            }
        }
        x
    });

    Ok(EtaPartials {
        s: s.to_vec(),
        times: times.to_vec(),
        ds,
        eta: eta.to_vec(),
        eta_s: e_s,
        eta_ss: e_ss,
        eta_t: e_t,
        eta_st: e_st,
        eta_tt: e_tt,
        eta_sst: e_sst,
        valid,
        time_weight_norm: wnorm,
        xi,
    })
}

/// Determinant lattice with the split-branch estimates of `G phi` and
/// `Q phi` (entries are NaN off the valid lattice).
#[derive(Clone, Debug, PartialEq)]
pub struct Determinant {
    pub d: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

/// `D = eta_s eta_sst - eta_st eta_ss` with
/// `f = (eta_s eta_tt - eta_st eta_t) / D`, `g = (eta_t eta_sst - eta_tt eta_ss) / D`.
pub fn determinant_d(p: &EtaPartials) -> Determinant {
    let (nt, nb) = (p.valid.len(), p.s.len());
    let mut out = Determinant {
        d: vec![vec![f64::NAN; nb]; nt],
        f: vec![vec![f64::NAN; nb]; nt],
        g: vec![vec![f64::NAN; nb]; nt],
    };
    for (k, b) in p.valid_points() {
        let d = p.eta_s[k][b] * p.eta_sst[k][b] - p.eta_st[k][b] * p.eta_ss[k][b];
        out.d[k][b] = d;
        out.f[k][b] = (p.eta_s[k][b] * p.eta_tt[k][b] - p.eta_st[k][b] * p.eta_t[k][b]) / d;
        out.g[k][b] = (p.eta_t[k][b] * p.eta_sst[k][b] - p.eta_tt[k][b] * p.eta_ss[k][b]) / d;
    }
    out
}

/// `D_xi = xi xi_st - xi_s xi_t` with `G phi = (alpha+1)(xi eta_tt - xi_t eta_t) / D_xi`
/// and `Q phi = (xi_st eta_t - xi_s eta_tt) / D_xi`. Requires the xi family.
pub fn determinant_xi(p: &EtaPartials) -> Result<Determinant> {
    let x =
        p.xi.as_ref()
            .ok_or_else(|| Error::InsufficientData("partials were built without alpha".into()))?;
    let (nt, nb) = (p.valid.len(), p.s.len());
    let mut out = Determinant {
        d: vec![vec![f64::NAN; nb]; nt],
        f: vec![vec![f64::NAN; nb]; nt],
        g: vec![vec![f64::NAN; nb]; nt],
    };
    for (k, b) in p.valid_points() {
        let d = x.xi[k][b] * x.xi_st[k][b] - x.xi_s[k][b] * x.xi_t[k][b];
        out.d[k][b] = d;
        out.f[k][b] = (x.alpha + 1.0) * (x.xi[k][b] * p.eta_tt[k][b] - x.xi_t[k][b] * p.eta_t[k][b]) / d;
        out.g[k][b] = (x.xi_st[k][b] * p.eta_t[k][b] - x.xi_s[k][b] * p.eta_tt[k][b]) / d;
    }
    Ok(out)
}

/// Thresholds of the two-sided determinant test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DTestConfig {
    /// Multiple of the propagated noise a point must exceed.
    pub kappa: f64,
    /// Floor on the dimensionless determinant `D L (T - tau) / eta_s^2`.
    pub abs_floor: f64,
}

impl Default for DTestConfig {
    fn default() -> Self {
        Self {
            kappa: 10.0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DTest {
    /// Dimensionless determinant (NaN off the valid lattice).
    pub normalized: Vec<Vec<f64>>,
    /// Propagated noise of the dimensionless determinant.
    pub noise: Vec<Vec<f64>>,
    pub significant: Vec<Vec<bool>>,
    /// Bins significant at some time.
    pub significant_bins: Vec<bool>,
    /// Estimated noise of the table entries.
    pub eta_noise: f64,
    pub max_normalized: f64,
    pub nonzero: bool,
}

/// Roughness-based noise of the table: a robust scale of the fourth
/// differences in `s`, floored at a few ulps of the table magnitude.
pub fn eta_noise(eta: &[Vec<f64>]) -> f64 {
    let mut r = Vec::new();
    let mut mag: f64 = 0.0;
    for row in eta {
        for w in row.windows(5) {
            if w.iter().any(|v| v.is_nan()) {
                continue;
            }
            r.push((w[0] - 4.0 * w[1] + 6.0 * w[2] - 4.0 * w[3] + w[4]).abs());
        }
        mag = row.iter().filter(|v| !v.is_nan()).fold(mag, |m, v| m.max(v.abs()));
    }
    let robust = median(&r).map_or(0.0, |m| m / (0.6745 * 70f64.sqrt()));
    robust.max(16.0 * f64::EPSILON * mag)
}

/// Marks lattice points where `|D|` exceeds both `kappa` times its
/// propagated noise and the absolute floor (in dimensionless units).
/// Works on the `xi` determinant when `use_xi` is set.
pub fn d_test(p: &EtaPartials, det: &Determinant, cfg: &DTestConfig, use_xi: bool) -> DTest {
    let (nt, nb) = (p.valid.len(), p.s.len());
    let sigma = eta_noise(&p.eta);
    let span = p.s[nb - 1] - p.s[0] + p.ds;
    let horizon = p.times[nt - 1] - p.times[0];
    let mut normalized = vec![vec![f64::NAN; nb]; nt];
    let mut noise = vec![vec![f64::NAN; nb]; nt];
    let mut significant = vec![vec![false; nb]; nt];
    let mut significant_bins = vec![false; nb];
    let mut max_norm: f64 = 0.0;
    let sd_s = sigma * std::f64::consts::FRAC_1_SQRT_2 / p.ds;
    let sd_ss = sigma * 6f64.sqrt() / (p.ds * p.ds);
    for (k, b) in p.valid_points() {
        let wn = p.time_weight_norm[k];
        let (sd_st, sd_sst) = (sd_s * wn, sd_ss * wn);
        let (es, ess, est, esst) = (p.eta_s[k][b], p.eta_ss[k][b], p.eta_st[k][b], p.eta_sst[k][b]);
        let mut sd_d = es.abs() * sd_sst + esst.abs() * sd_s + est.abs() * sd_ss + ess.abs() * sd_st;
        let mut scale = span * horizon / (es * es);
        if use_xi {
            if let Some(x) = &p.xi {
                // xi ~ eta_s^(a+1): first-order propagation of the same noise
                let a1 = x.alpha + 1.0;
                let ratio = x.xi[k][b] / es;
                sd_d *= a1 * a1 * ratio * ratio;
                scale = span * horizon / (x.xi[k][b] * x.xi[k][b]);
            }
        }
        let dn = det.d[k][b] * scale;
        let nn = sd_d * scale;
        normalized[k][b] = dn;
        noise[k][b] = nn;
        max_norm = max_norm.max(dn.abs());
        if dn.abs() > cfg.kappa * nn && dn.abs() > cfg.abs_floor {
            significant[k][b] = true;
            significant_bins[b] = true;
        }
    }
    let nonzero = significant.iter().flatten().any(|&s| s);
    DTest {
        normalized,
        noise,
        significant,
        significant_bins,
        eta_noise: sigma,
        max_normalized: max_norm,
        nonzero,
    }
}
