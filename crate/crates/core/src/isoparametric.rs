//! Isoparametric analysis: level-function fits `G phi = f(phi)`,
//! `Q phi = g(phi)`, surface typing, the anisotropic Weingarten operator and
//! mean curvature, their identities, and geodesics of `DH(D phi)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convex::ConvexBody;
use crate::error::{Error, Result};
use crate::grid::{self, MatrixField, ScalarField, VectorField};
use crate::invariance::{bin_of, choose_bins, local_line_profile, MAX_EMPTY_FRACTION};
use crate::numeric::{orthogonal_complement, sym_eigenvalues, sym_sqrt, three_point_weights};
use crate::operators::{OperatorKind, QuasiLinearOperator, DEFAULT_GRADIENT_FLOOR};
use crate::par;

pub const DEFAULT_TOL_ISO: f64 = 1e-2;

/// Piecewise-linear `F` with `psi ~ F(phi)`, sampled at bin centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelFunctionFit {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// `F'` at the knots (centred differences, one-sided at the ends).
    pub derivative: Vec<f64>,
    pub counts: Vec<usize>,
    /// RMS of `psi - F(phi)` over the samples divided by
    /// `max(range psi, mean |psi|)`.
    pub residual: f64,
}

impl LevelFunctionFit {
    fn segment(&self, s: f64) -> usize {
        self.knots
            .partition_point(|&k| k <= s)
            .clamp(1, self.knots.len().max(2) - 1)
    }

    fn lerp(&self, ys: &[f64], s: f64) -> f64 {
        if self.knots.len() == 1 {
            return ys[0];
        }
        let j = self.segment(s);
        let (k0, k1) = (self.knots[j - 1], self.knots[j]);
        ys[j - 1] + (ys[j] - ys[j - 1]) * (s - k0) / (k1 - k0)
    }

    /// `F(s)`, linearly extrapolated beyond the outer knots.
    pub fn eval(&self, s: f64) -> f64 {
        self.lerp(&self.values, s)
    }

    pub fn eval_derivative(&self, s: f64) -> f64 {
        self.lerp(&self.derivative, s)
    }
}

/// Fits `psi ~ F(phi)` over the interior nodes of a shared grid.
pub fn fit_level_function(phi: &ScalarField, psi: &ScalarField, n_knots: Option<usize>) -> Result<LevelFunctionFit> {
    if !phi.shares_domain(psi) {
        return Err(Error::InvalidField("fields must share grid and mask".into()));
    }
    let nodes = phi.mask().interior_nodes();
    let s: Vec<f64> = nodes.iter().map(|&i| phi.value(i)).collect();
    let p: Vec<f64> = nodes.iter().map(|&i| psi.value(i)).collect();
    fit_level_samples(&s, &p, n_knots)
}

/// Fits `psi ~ F(s)` from paired samples: equal-width bins in `s`, the
/// value at each bin centre from a local line (as for the eta table).
pub fn fit_level_samples(s: &[f64], psi: &[f64], n_knots: Option<usize>) -> Result<LevelFunctionFit> {
    fit_level_samples_floored(s, psi, n_knots, 0.0)
}

/// As [`fit_level_samples`], with `scale_floor` as a lower bound on the
/// residual normalisation (for `psi` that vanishes identically).
pub fn fit_level_samples_floored(
    s: &[f64],
    psi: &[f64],
    n_knots: Option<usize>,
    scale_floor: f64,
) -> Result<LevelFunctionFit> {
    if s.len() != psi.len() || s.is_empty() {
        return Err(Error::InsufficientData("need paired, non-empty samples".into()));
    }
    let (lo, hi) = s
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1e-300)) {
        return Err(Error::InvalidField("level function argument is constant".into()));
    }
    let nb = n_knots.unwrap_or_else(|| choose_bins(s, s.len())).max(2);
    let width = (hi - lo) / nb as f64;
    let centres: Vec<f64> = (0..nb).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (i, &v) in s.iter().enumerate() {
        members[bin_of(v, lo, width, nb)].push(i);
    }
    let empty = members.iter().filter(|m| m.is_empty()).count();
    if empty as f64 > MAX_EMPTY_FRACTION * nb as f64 {
        return Err(Error::InsufficientLevelResolution { empty, total: nb });
    }
    let (vals, _) = local_line_profile(&members, &centres, width, |i| s[i], |i| psi[i]);
    let keep: Vec<usize> = (0..nb).filter(|&b| !members[b].is_empty()).collect();
    let knots: Vec<f64> = keep.iter().map(|&b| centres[b]).collect();
    let values: Vec<f64> = keep.iter().map(|&b| vals[b]).collect();
    let counts: Vec<usize> = keep.iter().map(|&b| members[b].len()).collect();
    let n = knots.len();
    let derivative: Vec<f64> = (0..n)
        .map(|j| match n {
            1 => 0.0,
            _ if j == 0 => (values[1] - values[0]) / (knots[1] - knots[0]),
            _ if j == n - 1 => (values[n - 1] - values[n - 2]) / (knots[n - 1] - knots[n - 2]),
            _ => {
                let (w, _) = three_point_weights(knots[j - 1], knots[j], knots[j + 1]);
                w[0] * values[j - 1] + w[1] * values[j] + w[2] * values[j + 1]
            }
        })
        .collect();
    let mut fit = LevelFunctionFit {
        knots,
        values,
        derivative,
        counts,
        residual: 0.0,
    };
    let (pmin, pmax) = psi
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean_abs = psi.iter().map(|v| v.abs()).sum::<f64>() / psi.len() as f64;
    let scale = (pmax - pmin).max(mean_abs).max(scale_floor);
    let sse: f64 = s.iter().zip(psi).map(|(&a, &b)| (b - fit.eval(a)).powi(2)).sum();
    let rms = (sse / s.len() as f64).sqrt();
    fit.residual = if scale > 0.0 { rms / scale } else { 0.0 };
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsoConfig {
    pub n_knots: Option<usize>,
    pub tol_iso: f64,
    /// Drop sub-floor nodes (critical levels) instead of failing.
    pub exclude_critical: bool,
}

impl Default for IsoConfig {
    fn default() -> Self {
        Self {
            n_knots: None,
            tol_iso: DEFAULT_TOL_ISO,
            exclude_critical: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoparametricResidual {
    /// Fit of `G phi`.
    pub f: LevelFunctionFit,
    /// Fit of `Q phi`.
    pub g: LevelFunctionFit,
    /// For h-Laplace operators: normalised RMS of `2H(D phi) - f(phi)`.
    pub euler: Option<f64>,
    pub pass: bool,
    /// Interior nodes left out because `|D phi|` fell below the floor.
    pub excluded: Vec<usize>,
}

/// Fits `G phi = f(phi)` and `Q phi = g(phi)` over interior nodes and
/// passes when both normalised residuals are within `tol_iso`.
pub fn isoparametric_residual(
    phi: &ScalarField,
    op: &QuasiLinearOperator,
    cfg: &IsoConfig,
) -> Result<IsoparametricResidual> {
    let grad = grid::gradient(phi)?;
    let (gf, _) = op.apply_g_regular(phi)?;
    let (qf, _) = op.apply_q_regular(phi)?;
    let interior = phi.mask().interior_nodes();
    let floor = op.gradient_floor();
    let (nodes, excluded): (Vec<usize>, Vec<usize>) = interior.into_iter().partition(|&i| grad.at(i).norm() >= floor);
    if !excluded.is_empty() && !cfg.exclude_critical {
        return Err(Error::DegenerateGradient { nodes: excluded });
    }
    let s: Vec<f64> = nodes.iter().map(|&i| phi.value(i)).collect();
    let gv: Vec<f64> = nodes.iter().map(|&i| gf.value(i)).collect();
    let qv: Vec<f64> = nodes.iter().map(|&i| qf.value(i)).collect();
    let f = fit_level_samples(&s, &gv, cfg.n_knots)?;
    // `Q phi` scales like `G phi / phi`: the floor keeps `g = 0` well posed
    let (lo, hi) = s
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let g_floor = gv.iter().map(|v| v.abs()).sum::<f64>() / gv.len() as f64 / (hi - lo);
    let g = fit_level_samples_floored(&s, &qv, cfg.n_knots, g_floor)?;
    let euler = match op.kind() {
        OperatorKind::HLaplace { body } => {
            let two_h = nodes
                .iter()
                .map(|&i| Ok(2.0 * body.h_function(grad.at(i).as_slice())?))
                .collect::<Result<Vec<f64>>>()?;
            let (lo, hi) = two_h
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = two_h.iter().map(|v| v.abs()).sum::<f64>() / two_h.len() as f64;
            let sse: f64 = s.iter().zip(&two_h).map(|(&a, &b)| (b - f.eval(a)).powi(2)).sum();
            let scale = (hi - lo).max(mean);
            Some(if scale > 0.0 {
                (sse / s.len() as f64).sqrt() / scale
            } else {
                0.0
            })
        }
        _ => None,
    };
    let pass = f.residual <= cfg.tol_iso && g.residual <= cfg.tol_iso && euler.is_none_or(|e| e <= cfg.tol_iso);
    Ok(IsoparametricResidual {
        f,
        g,
        euler,
        pass,
        excluded,
    })
}

/// Value, gradient and Hessian of `phi` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDerivatives {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl PointDerivatives {
    fn normal(&self) -> Result<DVector<f64>> {
        let r = self.grad.norm();
        if !(r >= DEFAULT_GRADIENT_FLOOR) {
            return Err(Error::DegenerateGradient { nodes: vec![] });
        }
        Ok(&self.grad / r)
    }

    /// Orthonormal basis of the tangent space (as columns).
    pub fn tangent_basis(&self) -> DMatrix<f64> {
        orthogonal_complement(&self.grad)
    }
}

/// Fourth-order (where the stencil fits) gradient and Hessian of a field, evaluated at nodes or
/// by multilinear interpolation at points.
#[derive(Clone, Debug)]
pub struct DerivativeFields {
    phi: ScalarField,
    grad: VectorField,
    hess: MatrixField,
}

impl DerivativeFields {
    pub fn new(phi: &ScalarField) -> Result<Self> {
        let (grad, hess) = grid::derivatives_wide(phi)?;
        Ok(Self {
            phi: phi.clone(),
            grad,
            hess,
        })
    }

    pub fn phi(&self) -> &ScalarField {
        &self.phi
    }

    pub fn at_node(&self, lin: usize) -> PointDerivatives {
        PointDerivatives {
            x: DVector::from_vec(self.phi.grid().coord(lin)),
            value: self.phi.value(lin),
            grad: self.grad.at(lin),
            hess: self.hess.at(lin),
        }
    }

    pub fn at_point(&self, x: &[f64]) -> Result<PointDerivatives> {
        Ok(PointDerivatives {
            x: DVector::from_column_slice(x),
            value: grid::interpolate(&self.phi, x)?,
            grad: self.grad.interpolate(x)?,
            hess: self.hess.interpolate(x)?,
        })
    }

    /// Fit of `2H(D phi)` against `phi` with the higher-order gradient; its
    /// derivative is the `f'` used by the derivative identities.
    pub fn fit_energy(&self, body: &ConvexBody, n_knots: Option<usize>) -> Result<LevelFunctionFit> {
        let nodes = self.phi.mask().interior_nodes();
        let s: Vec<f64> = nodes.iter().map(|&i| self.phi.value(i)).collect();
        let e = nodes
            .iter()
            .map(|&i| Ok(2.0 * body.h_function(self.grad.at(i).as_slice())?))
            .collect::<Result<Vec<f64>>>()?;
        fit_level_samples(&s, &e, n_knots)
    }

    /// Interior nodes within half a grid step (measured along the gradient)
    /// of the level `s`.
    pub fn level_nodes(&self, s: f64) -> Vec<usize> {
        let h = self.phi.grid().min_spacing();
        self.phi
            .mask()
            .interior_nodes()
            .into_iter()
            .filter(|&i| (self.phi.value(i) - s).abs() <= 0.5 * h * self.grad.at(i).norm())
            .collect()
    }
}

/// `W = D^2 h(nu) D^2 phi / |D phi|`.
pub fn weingarten(d: &PointDerivatives, body: &ConvexBody) -> Result<DMatrix<f64>> {
    let nu = d.normal()?;
    Ok(body.support_hessian(nu.as_slice())? * &d.hess / d.grad.norm())
}

/// `W` restricted to the tangent space, in the basis of
/// [`PointDerivatives::tangent_basis`].
pub fn tangential_weingarten(d: &PointDerivatives, body: &ConvexBody) -> Result<DMatrix<f64>> {
    let p = d.tangent_basis();
    Ok(p.transpose() * weingarten(d, body)? * p)
}

/// `M = (tr(D^2H D^2 phi) - D phi . D^2H D^2 phi D phi / |D phi|^2) / h(D phi)`.
pub fn aniso_mean_curvature(d: &PointDerivatives, body: &ConvexBody) -> Result<f64> {
    d.normal()?;
    let xi = d.grad.as_slice();
    let a = body.d2h(xi)?;
    let ah = &a * &d.hess;
    let g2 = d.grad.norm_squared();
    Ok((ah.trace() - d.grad.dot(&(&ah * &d.grad)) / g2) / body.support(xi)?)
}

/// Principal curvatures of the level surface, ascending: eigenvalues of
/// `D^2 phi / |D phi|` on the tangent space, or of the tangential
/// Weingarten operator (symmetrised as `S^1/2 B S^1/2`) when a body is given.
pub fn principal_curvatures(d: &PointDerivatives, body: Option<&ConvexBody>) -> Result<Vec<f64>> {
    let nu = d.normal()?;
    let p = d.tangent_basis();
    let b = p.transpose() * &d.hess * &p / d.grad.norm();
    let m = match body {
        None => b,
        Some(body) => {
            let s = sym_sqrt(&(p.transpose() * body.support_hessian(nu.as_slice())? * &p));
            &s * b * &s
        }
    };
    Ok(sym_eigenvalues(&m))
}

/// Residuals of the derivative identities, each normalised by
/// `||D^2 phi|| |DH| + |f'| |D phi|` (floored at `sqrt(eps) |D phi| |DH|`):
/// `D^2phi D^2H Dphi + D^2phi DH = f' Dphi`, `2 D^2phi DH = f' Dphi` and
/// `D^2phi D^2H Dphi = D^2phi DH`.
pub fn check_identities(d: &PointDerivatives, body: &ConvexBody, f_prime: f64) -> Result<[f64; 3]> {
    d.normal()?;
    let xi = d.grad.as_slice();
    let dh = body.dh(xi)?;
    let a = body.d2h(xi)?;
    let lhs = &d.hess * (&a * &d.grad);
    let hdh = &d.hess * &dh;
    let fd = &d.grad * f_prime;
    // floored so that flat fields (vanishing Hessian) do not amplify roundoff
    let scale = (d.hess.norm() * dh.norm() + f_prime.abs() * d.grad.norm())
        .max(f64::EPSILON.sqrt() * d.grad.norm() * dh.norm())
        .max(f64::MIN_POSITIVE);
    Ok([
        (&lhs + &hdh - &fd).norm() / scale,
        (&hdh * 2.0 - &fd).norm() / scale,
        (&lhs - &hdh).norm() / scale,
    ])
}

/// Largest `|v^T (W - D^2H D^2 phi / h(D phi)) w|` over tangent basis pairs.
pub fn shape_restriction_check(d: &PointDerivatives, body: &ConvexBody) -> Result<f64> {
    let xi = d.grad.as_slice();
    let r = body.d2h(xi)? * &d.hess / body.support(xi)?;
    let p = d.tangent_basis();
    let diff = p.transpose() * (weingarten(d, body)? - r) * &p;
    Ok(diff.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Largest relative violation of `xi . DH(xi) = 2 H(xi)` over the samples.
pub fn euler_check(body: &ConvexBody, samples: &[DVector<f64>]) -> Result<f64> {
    samples.iter().try_fold(0.0f64, |m, xi| {
        let lhs = xi.dot(&body.dh(xi.as_slice())?);
        let rhs = 2.0 * body.h_function(xi.as_slice())?;
        Ok(m.max((lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE)))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureCluster {
    pub value: f64,
    pub multiplicity: usize,
}

/// Groups ascending values: a value joins the current cluster when it lies
/// within `max(1e-3, 0.05 |mean|)` of the cluster mean.
pub fn cluster_values(sorted: &[f64]) -> Vec<CurvatureCluster> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for &v in sorted {
        if let Some((sum, n)) = out.last_mut() {
            let mean = *sum / *n as f64;
            if (v - mean).abs() <= 1e-3f64.max(0.05 * mean.abs()) {
                *sum += v;
                *n += 1;
                continue;
            }
        }
        out.push((v, 1));
    }
    out.into_iter()
        .map(|(sum, n)| CurvatureCluster {
            value: sum / n as f64,
            multiplicity: n,
        })
        .collect()
}

/// Per-level anisotropic diagnostics over nodes adjacent to the level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub level: f64,
    pub n_points: usize,
    pub m_mean: f64,
    pub m_std: f64,
    /// `m_std / |m_mean|` (absent when the mean vanishes).
    pub m_rel_std: Option<f64>,
    /// `(g - f'/2) / sqrt(f)` from the level fits, when supplied.
    pub m_formula: Option<f64>,
    /// Largest `|M - tr W_T|`.
    pub m_vs_trace: f64,
    /// Largest residual of each derivative identity.
    pub identities: [f64; 3],
    pub shape_restriction: f64,
    pub clusters: Vec<CurvatureCluster>,
}

pub fn level_geometry(
    fields: &DerivativeFields,
    s: f64,
    body: &ConvexBody,
    f_fit: &LevelFunctionFit,
    g_fit: Option<&LevelFunctionFit>,
) -> Result<LevelGeometry> {
    let nodes = fields.level_nodes(s);
    if nodes.is_empty() {
        return Err(Error::TooFewSamples { found: 0, needed: 1 });
    }
    struct Sample {
        m: f64,
        trace: f64,
        ids: [f64; 3],
        shape: f64,
        kappa: Vec<f64>,
    }
    let samples = par::try_map_indexed(nodes.len(), |k| {
        let d = fields.at_node(nodes[k]);
        let fp = f_fit.eval_derivative(d.value);
        Ok::<_, Error>(Sample {
            m: aniso_mean_curvature(&d, body)?,
            trace: tangential_weingarten(&d, body)?.trace(),
            ids: check_identities(&d, body, fp)?,
            shape: shape_restriction_check(&d, body)?,
            kappa: principal_curvatures(&d, Some(body))?,
        })
    })?;
    let n = samples.len() as f64;
    let m_mean = samples.iter().map(|x| x.m).sum::<f64>() / n;
    let m_std = (samples.iter().map(|x| (x.m - m_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut identities = [0.0f64; 3];
    for smp in &samples {
        for (acc, v) in identities.iter_mut().zip(smp.ids) {
            *acc = acc.max(v);
        }
    }
    let dim = fields.phi().grid().dim();
    let kappa = median_columns(samples.iter().map(|x| &x.kappa), dim.saturating_sub(1));
    Ok(LevelGeometry {
        level: s,
        n_points: samples.len(),
        m_mean,
        m_std,
        m_rel_std: (m_mean != 0.0).then(|| m_std / m_mean.abs()),
        m_formula: g_fit.map(|g| (g.eval(s) - 0.5 * f_fit.eval_derivative(s)) / f_fit.eval(s).sqrt()),
        m_vs_trace: samples.iter().map(|x| (x.m - x.trace).abs()).fold(0.0, f64::max),
        identities,
        shape_restriction: samples.iter().map(|x| x.shape).fold(0.0, f64::max),
        clusters: cluster_values(&kappa),
    })
}

/// Component-wise median of equally long vectors.
fn median_columns<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, n: usize) -> Vec<f64> {
    let rows: Vec<&Vec<f64>> = rows.filter(|r| r.len() == n).collect();
    (0..n)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            crate::numeric::median(&col).unwrap_or(f64::NAN)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Sphere,
    SphericalCylinder(usize),
    Hyperplane,
    WulffSphere,
    WulffCylinder(usize),
    Unknown,
}

impl SurfaceKind {
    pub fn label(&self) -> String {
        match self {
            Self::Sphere => "sphere".into(),
            Self::SphericalCylinder(m) => format!("spherical_cylinder({m})"),
            Self::Hyperplane => "hyperplane".into(),
            Self::WulffSphere => "wulff_sphere".into(),
            Self::WulffCylinder(m) => format!("wulff_cylinder({m})"),
            Self::Unknown => "unknown".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTypeReport {
    pub level: f64,
    pub kind: SurfaceKind,
    /// Sphere or Wulff centre, a point on a cylinder axis, or the centroid
    /// of a hyperplane sample.
    pub center: Option<Vec<f64>>,
    /// Cylinder axis directions, or the hyperplane normal.
    pub axes: Vec<Vec<f64>>,
    /// Radius (sphere / cylinder) or Wulff scale.
    pub radius: Option<f64>,
    pub clusters: Vec<CurvatureCluster>,
    /// Relative RMS misfit of the geometric model, when one was fitted.
    pub fit_residual: Option<f64>,
    pub n_samples: usize,
}

/// Types the level set `{phi = s}` from its principal-curvature clusters
/// and fits the matching model (sphere, cylinder, hyperplane, Wulff shape).
pub fn classify_surface(phi: &ScalarField, s: f64, body: Option<&ConvexBody>) -> Result<SurfaceTypeReport> {
    classify_surface_with(&DerivativeFields::new(phi)?, s, body)
}

pub fn classify_surface_with(
    fields: &DerivativeFields,
    s: f64,
    body: Option<&ConvexBody>,
) -> Result<SurfaceTypeReport> {
    let dim = fields.phi().grid().dim();
    let raw = grid::level_set_points(fields.phi(), s);
    let samples: Vec<(PointDerivatives, Vec<f64>)> = raw
        .iter()
        .filter_map(|p| {
            let d = fields.at_point(p).ok()?;
            let k = principal_curvatures(&d, body).ok()?;
            Some((d, k))
        })
        .collect();
    let needed = (10 * dim.saturating_sub(1)).max(1);
    if samples.len() < needed {
        return Err(Error::TooFewSamples {
            found: samples.len(),
            needed,
        });
    }
    let pts: Vec<DVector<f64>> = samples.iter().map(|(d, _)| d.x.clone()).collect();
    let normals: Vec<DVector<f64>> = samples.iter().map(|(d, _)| d.grad.normalize()).collect();

    if dim == 1 {
        return Ok(point_levels(s, &pts));
    }
    let kappa = median_columns(samples.iter().map(|(_, k)| k), dim - 1);
    let clusters = cluster_values(&kappa);
    let kmax = clusters.iter().fold(0.0f64, |m, c| m.max(c.value.abs()));
    let zero_tol = 1e-3f64.max(0.05 * kmax);
    let nonzero: Vec<&CurvatureCluster> = clusters.iter().filter(|c| c.value.abs() > zero_tol).collect();
    let anisotropic = body.is_some_and(|b| !b.is_euclidean_ball());

    let mut report = SurfaceTypeReport {
        level: s,
        kind: SurfaceKind::Unknown,
        center: None,
        axes: Vec::new(),
        radius: None,
        clusters: clusters.clone(),
        fit_residual: None,
        n_samples: pts.len(),
    };
    match nonzero.len() {
        0 => {
            let n = normals.iter().fold(DVector::zeros(dim), |acc, v| acc + v).normalize();
            let c = centroid(&pts);
            let spread = pts.iter().map(|p| (p - &c).norm()).fold(0.0, f64::max).max(1e-300);
            let rms = (pts.iter().map(|p| n.dot(&(p - &c)).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
            report.kind = SurfaceKind::Hyperplane;
            report.center = Some(c.as_slice().to_vec());
            report.axes = vec![n.as_slice().to_vec()];
            report.fit_residual = Some(rms / spread);
        }
        1 => {
            let m = nonzero[0].multiplicity;
            let flat = dim - 1 - m;
            let axes = flat_directions(&normals, flat);
            if anisotropic {
                let body = body.expect("anisotropic implies a body");
                let (c, rho, res) = wulff_fit(&pts, &normals, body, &axes)?;
                if res <= 1e-2 {
                    report.kind = if flat == 0 {
                        SurfaceKind::WulffSphere
                    } else {
                        SurfaceKind::WulffCylinder(m)
                    };
                }
                report.center = Some(c.as_slice().to_vec());
                report.radius = Some(rho);
                report.fit_residual = res.is_finite().then_some(res);
            } else {
                let (c, r, res) = sphere_fit(&pts, &axes);
                report.kind = if flat == 0 {
                    SurfaceKind::Sphere
                } else {
                    SurfaceKind::SphericalCylinder(m)
                };
                report.center = Some(c.as_slice().to_vec());
                report.radius = Some(r);
                report.fit_residual = res.is_finite().then_some(res);
            }
            report.axes = axes.iter().map(|a| a.as_slice().to_vec()).collect();
        }
        _ => {}
    }
    Ok(report)
}

/// In one dimension levels are point sets: two points form a 0-sphere.
fn point_levels(s: f64, pts: &[DVector<f64>]) -> SurfaceTypeReport {
    let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let two = pts.len() == 2 && hi > lo;
    SurfaceTypeReport {
        level: s,
        kind: if two {
            SurfaceKind::Sphere
        } else if pts.len() == 1 {
            SurfaceKind::Hyperplane
        } else {
            SurfaceKind::Unknown
        },
        center: Some(vec![0.5 * (lo + hi)]),
        axes: Vec::new(),
        radius: two.then_some(0.5 * (hi - lo)),
        clusters: Vec::new(),
        fit_residual: Some(0.0),
        n_samples: pts.len(),
    }
}

fn centroid(pts: &[DVector<f64>]) -> DVector<f64> {
    pts.iter().fold(DVector::zeros(pts[0].len()), |a, p| a + p) / pts.len() as f64
}

/// Directions along which the normals do not vary: the eigenvectors of
/// `sum nu nu^T` with the `k` smallest eigenvalues.
fn flat_directions(normals: &[DVector<f64>], k: usize) -> Vec<DVector<f64>> {
    if k == 0 {
        return Vec::new();
    }
    let n = normals[0].len();
    let m = normals
        .iter()
        .fold(DMatrix::zeros(n, n), |acc, v| acc + v * v.transpose());
    let eig = m.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    idx[..k]
        .iter()
        .map(|&j| eig.eigenvectors.column(j).into_owned())
        .collect()
}

/// Projects out the flat directions.
fn project(p: &DVector<f64>, axes: &[DVector<f64>]) -> DVector<f64> {
    axes.iter().fold(p.clone(), |q, a| &q - a * a.dot(p))
}

/// Algebraic least-squares sphere `|p|^2 = 2 c.p + d` in the complement of
/// `axes`; returns centre, radius and relative RMS radial misfit.
fn sphere_fit(pts: &[DVector<f64>], axes: &[DVector<f64>]) -> (DVector<f64>, f64, f64) {
    let n = pts[0].len();
    let proj: Vec<DVector<f64>> = pts.iter().map(|p| project(p, axes)).collect();
    let mut a = DMatrix::zeros(proj.len(), n + 1);
    let mut b = DVector::zeros(proj.len());
    for (r, p) in proj.iter().enumerate() {
        for k in 0..n {
            a[(r, k)] = 2.0 * p[k];
        }
        a[(r, n)] = 1.0;
        b[r] = p.norm_squared();
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(n + 1));
    let c = project(&sol.rows(0, n).into_owned(), axes);
    let r = (sol[n] + c.norm_squared()).max(0.0).sqrt();
    let rms = (proj.iter().map(|p| ((p - &c).norm() - r).powi(2)).sum::<f64>() / proj.len() as f64).sqrt();
    (c, r, if r > 0.0 { rms / r } else { f64::INFINITY })
}

/// Least-squares Wulff model `p = c + rho Dh(nu(p))` (flat directions
/// projected out); returns centre, scale and relative RMS misfit.
fn wulff_fit(
    pts: &[DVector<f64>],
    normals: &[DVector<f64>],
    body: &ConvexBody,
    axes: &[DVector<f64>],
) -> Result<(DVector<f64>, f64, f64)> {
    let n = pts[0].len();
    let rows = pts.len() * n;
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut b = DVector::zeros(rows);
    let mut dirs = Vec::with_capacity(pts.len());
    for (j, (p, nu)) in pts.iter().zip(normals).enumerate() {
        let w = project(&body.support_gradient(nu.as_slice())?, axes);
        let q = project(p, axes);
        for k in 0..n {
            a[(j * n + k, k)] = 1.0;
            a[(j * n + k, n)] = w[k];
            b[j * n + k] = q[k];
        }
        dirs.push((q, w));
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InsufficientData(e.to_string()))?;
    let c = sol.rows(0, n).into_owned();
    let rho = sol[n];
    let sse: f64 = dirs.iter().map(|(q, w)| (q - &c - w * rho).norm_squared()).sum();
    let rms = (sse / pts.len() as f64).sqrt();
    Ok((c, rho, if rho != 0.0 { rms / rho.abs() } else { f64::INFINITY }))
}

/// Integral curve of `DH(D phi)` from a seed, with straightness and
/// level-rate diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicTrace {
    pub seed: Vec<f64>,
    pub taus: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub phi_values: Vec<f64>,
    /// Largest distance from the line `y + tau DH(D phi(y))`.
    pub straightness: f64,
    /// Largest `|(phi(gamma(tau)) - phi(y)) / tau - 1|`.
    pub level_rate_error: f64,
    /// The curve left the domain before `tau_max`.
    pub truncated: bool,
}

/// Value and gradient of the field at a point.
pub type GradientSource<'a> = dyn Fn(&[f64]) -> Result<(f64, DVector<f64>)> + 'a;

/// RK4 trace of `gamma' = DH(D phi(gamma))` on a gridded field, using
/// cubic interpolation for `phi` and `D phi`.
pub fn geodesic_trace(
    phi: &ScalarField,
    y: &[f64],
    body: &ConvexBody,
    tau_max: f64,
    n_steps: usize,
) -> Result<GeodesicTrace> {
    geodesic_trace_with(&|x: &[f64]| grid::interpolate_cubic(phi, x), y, body, tau_max, n_steps)
}

pub fn geodesic_trace_with(
    source: &GradientSource<'_>,
    y: &[f64],
    body: &ConvexBody,
    tau_max: f64,
    n_steps: usize,
) -> Result<GeodesicTrace> {
    if !(tau_max > 0.0) || n_steps == 0 {
        return Err(Error::InvalidField("need tau_max > 0 and at least one step".into()));
    }
    let velocity = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = source(x.as_slice())?;
        Ok((v, body.dh(g.as_slice())?))
    };
    let dt = tau_max / n_steps as f64;
    let y0 = DVector::from_column_slice(y);
    let (phi0, v0) = velocity(&y0)?;
    let mut x = y0.clone();
    let mut trace = GeodesicTrace {
        seed: y.to_vec(),
        taus: vec![0.0],
        points: vec![y.to_vec()],
        phi_values: vec![phi0],
        straightness: 0.0,
        level_rate_error: 0.0,
        truncated: false,
    };
    for step in 1..=n_steps {
        let stage = |x: &DVector<f64>| velocity(x).map(|(_, v)| v);
        let next = (|| -> Result<(f64, DVector<f64>)> {
            let k1 = stage(&x)?;
            let k2 = stage(&(&x + &k1 * (0.5 * dt)))?;
            let k3 = stage(&(&x + &k2 * (0.5 * dt)))?;
            let k4 = stage(&(&x + &k3 * dt))?;
            let xn = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            let (pv, _) = velocity(&xn)?;
            Ok((pv, xn))
        })();
        let (pv, xn) = match next {
            Ok(v) => v,
            Err(Error::OutsideDomain) | Err(Error::AxisTooSmall { .. }) => {
                trace.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let tau = step as f64 * dt;
        let line = &y0 + &v0 * tau;
        trace.straightness = trace.straightness.max((&xn - line).norm());
        trace.level_rate_error = trace.level_rate_error.max(((pv - phi0) / tau - 1.0).abs());
        trace.taus.push(tau);
        trace.points.push(xn.as_slice().to_vec());
        trace.phi_values.push(pv);
        x = xn;
    }
    Ok(trace)
}

/// Largest spread of `phi(gamma(tau))` across traces at common steps.
pub fn parallelism(traces: &[GeodesicTrace]) -> f64 {
    let n = traces.iter().map(|t| t.phi_values.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let (lo, hi) = traces.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| {
                (a.min(t.phi_values[i]), b.max(t.phi_values[i]))
            });
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Newton projection of `y` onto `{phi = s}` along the gradient of the
/// cubic interpolant.
pub fn project_to_level(phi: &ScalarField, y: &[f64], s: f64) -> Result<Vec<f64>> {
    let mut x = DVector::from_column_slice(y);
    for _ in 0..50 {
        let (v, g) = grid::interpolate_cubic(phi, x.as_slice())?;
        let g2 = g.norm_squared();
        if g2 == 0.0 {
            return Err(Error::DegenerateGradient { nodes: vec![] });
        }
        let step = &g * ((v - s) / g2);
        x -= &step;
        if step.norm() <= 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    Ok(x.as_slice().to_vec())
}

/// `psi = F(phi)` with `F' = f^(-1/2)`, integrated exactly for the
/// piecewise-linear interpolant of `f^(-1/2)` over the knots and anchored by
/// `F(k_0) = k_0 f(k_0)^(-1/2)`, so that constant `f` gives `phi / sqrt(f)`.
pub fn normalize_to_unit_f(phi: &ScalarField, f_fit: &LevelFunctionFit) -> Result<ScalarField> {
    let k = &f_fit.knots;
    if k.is_empty() {
        return Err(Error::InsufficientData("empty level fit".into()));
    }
    if let Some(j) = f_fit.values.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidField(format!(
            "f must be positive on the level range (f({}) = {})",
            k[j], f_fit.values[j]
        )));
    }
    let r: Vec<f64> = f_fit.values.iter().map(|v| v.powf(-0.5)).collect();
    let mut cum = vec![k[0] * r[0]];
    for j in 1..k.len() {
        cum.push(cum[j - 1] + 0.5 * (k[j] - k[j - 1]) * (r[j] + r[j - 1]));
    }
    let big_f = |s: f64| -> f64 {
        if k.len() == 1 {
            return cum[0] + (s - k[0]) * r[0];
        }
        let j = k.partition_point(|&x| x <= s).clamp(1, k.len() - 1) - 1;
        let span = k[j + 1] - k[j];
        let d = s - k[j];
        cum[j] + d * r[j] + 0.5 * (r[j + 1] - r[j]) * d * d / span
    };
    phi.map(big_f)
}
