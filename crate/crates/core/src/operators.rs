//! Quasi-linear operators `Q u = sum a_ij(Du) u_ij` with coefficients
//! homogeneous of degree `alpha` in the gradient, and the generalized
//! gradient `G u = Du . a(Du) Du`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convex::{BodySpec, ConvexBody};
use crate::error::{Error, Result};
use crate::grid::{self, BoundaryStencil, NodeKind, ScalarField, Stencil};
use crate::numeric::{fit_line, sym_eigenvalues};
use crate::par;

pub const DEFAULT_GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum OperatorKind {
    Heat,
    PLaplace { p: f64 },
    NormalizedPLaplace { p: f64 },
    HLaplace { body: ConvexBody },
}

/// JSON form, e.g. `{"kind":"p_laplace","p":3.0}` or
/// `{"kind":"h_laplace","body":{"kind":"euclidean_ball"}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Heat {},
    PLaplace { p: f64 },
    NormalizedPLaplace { p: f64 },
    HLaplace { body: BodySpec },
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<QuasiLinearOperator> {
        let kind = match self {
            OperatorSpec::Heat {} => OperatorKind::Heat,
            OperatorSpec::PLaplace { p } => OperatorKind::PLaplace { p: *p },
            OperatorSpec::NormalizedPLaplace { p } => OperatorKind::NormalizedPLaplace { p: *p },
            OperatorSpec::HLaplace { body } => OperatorKind::HLaplace { body: body.build(dim)? },
        };
        QuasiLinearOperator::new(dim, kind)
    }
}

#[derive(Clone, Debug)]
pub struct QuasiLinearOperator {
    dim: usize,
    kind: OperatorKind,
    gradient_floor: f64,
}

impl QuasiLinearOperator {
    pub fn new(dim: usize, kind: OperatorKind) -> Result<Self> {
        match &kind {
            OperatorKind::PLaplace { p } | OperatorKind::NormalizedPLaplace { p } => {
                if !(p.is_finite() && *p > 1.0) {
                    return Err(Error::InvalidOperator(format!(
                        "p must exceed 1 (alpha = p - 2 > -1), got {p}"
                    )));
                }
            }
            OperatorKind::HLaplace { body } if body.dim() != dim => {
                return Err(Error::InvalidOperator(format!(
                    "body dimension {} differs from operator dimension {dim}",
                    body.dim()
                )));
            }
            _ => {}
        }
        Ok(Self {
            dim,
            kind,
            gradient_floor: DEFAULT_GRADIENT_FLOOR,
        })
    }

    pub fn heat(dim: usize) -> Self {
        Self::new(dim, OperatorKind::Heat).expect("heat operator is always valid")
    }

    pub fn with_gradient_floor(mut self, floor: f64) -> Self {
        self.gradient_floor = floor;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn gradient_floor(&self) -> f64 {
        self.gradient_floor
    }

    pub fn is_heat(&self) -> bool {
        matches!(self.kind, OperatorKind::Heat)
    }

    /// Declared homogeneity degree of the coefficients.
    pub fn alpha(&self) -> f64 {
        match self.kind {
            OperatorKind::PLaplace { p } => p - 2.0,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            OperatorKind::Heat => "heat",
            OperatorKind::PLaplace { .. } => "p_laplace",
            OperatorKind::NormalizedPLaplace { .. } => "normalized_p_laplace",
            OperatorKind::HLaplace { .. } => "h_laplace",
        }
    }

    /// Coefficient matrix `a(xi)`.
    pub fn coefficients(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim;
        if xi.len() != n {
            return Err(Error::InvalidOperator(format!(
                "gradient has {} components, operator dimension is {n}",
                xi.len()
            )));
        }
        if self.is_heat() {
            return Ok(DMatrix::identity(n, n));
        }
        let v = DVector::from_column_slice(xi);
        let r = v.norm();
        if r == 0.0 {
            return Err(Error::DegenerateGradient { nodes: vec![] });
        }
        Ok(match &self.kind {
            OperatorKind::Heat => unreachable!(),
            OperatorKind::PLaplace { p } => {
                let u = &v / r;
                (DMatrix::identity(n, n) + &u * u.transpose() * (p - 2.0)) * r.powf(p - 2.0)
            }
            OperatorKind::NormalizedPLaplace { p } => {
                let u = &v / r;
                DMatrix::identity(n, n) + &u * u.transpose() * (p - 2.0)
            }
            OperatorKind::HLaplace { body } => body.d2h(xi)?,
        })
    }

    /// `sum a_ij(grad) hess_ij`, accumulating the diagonal first in axis
    /// order and skipping zero off-diagonal coefficients, so an identity
    /// coefficient matrix reproduces the grid Laplacian bit for bit.
    fn contract(a: &DMatrix<f64>, hess: &DMatrix<f64>) -> f64 {
        let n = a.nrows();
        let mut acc = 0.0;
        for k in 0..n {
            acc += a[(k, k)] * hess[(k, k)];
        }
        for k in 0..n {
            for l in 0..n {
                if k != l && a[(k, l)] != 0.0 {
                    acc += a[(k, l)] * hess[(k, l)];
                }
            }
        }
        acc
    }

    pub(crate) fn q_at(&self, st: &Stencil<'_>, lin: usize) -> Result<f64> {
        if self.is_heat() {
            return Ok(st.laplacian_at(lin));
        }
        let g = st.gradient_at(lin);
        if g.norm() < self.gradient_floor {
            return Err(Error::DegenerateGradient { nodes: vec![lin] });
        }
        let a = self.coefficients(g.as_slice())?;
        Ok(Self::contract(&a, &st.hessian_at(lin)))
    }

    fn check_dims(&self, field: &ScalarField) -> Result<()> {
        if field.grid().dim() != self.dim {
            return Err(Error::InvalidOperator(format!(
                "field dimension {} differs from operator dimension {}",
                field.grid().dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Interior nodes whose gradient falls below the floor.
    pub fn degenerate_nodes(&self, field: &ScalarField) -> Result<Vec<usize>> {
        let grad = grid::gradient(field)?;
        Ok(field
            .mask()
            .interior_nodes()
            .into_iter()
            .filter(|&i| grad.at(i).norm() < self.gradient_floor)
            .collect())
    }

    /// `Q u` at every active node. For non-heat operators the gradient must
    /// clear the floor at interior nodes; boundary nodes below the floor are
    /// reported as zero.
    pub fn apply_q(&self, field: &ScalarField) -> Result<ScalarField> {
        let (q, bad) = self.apply_q_regular(field)?;
        if !bad.is_empty() {
            return Err(Error::DegenerateGradient { nodes: bad });
        }
        Ok(q)
    }

    /// `Q u` with zeros at sub-floor nodes, together with the interior nodes
    /// that fell below the floor.
    pub fn apply_q_regular(&self, field: &ScalarField) -> Result<(ScalarField, Vec<usize>)> {
        self.apply_q_with(field, BoundaryStencil::OneSided)
    }

    pub(crate) fn apply_q_with(&self, field: &ScalarField, mode: BoundaryStencil) -> Result<(ScalarField, Vec<usize>)> {
        self.check_dims(field)?;
        if self.is_heat() {
            return Ok((grid::laplacian_with(field, mode)?, Vec::new()));
        }
        // surfaces the axis-size error before any per-node work
        grid::gradient(field)?;
        let st = field.stencil(mode);
        let mask = field.mask();
        let results = par::map_indexed(field.grid().len(), |i| match mask.kind(i) {
            NodeKind::Exterior => Ok(0.0),
            NodeKind::Interior => self.q_at(&st, i),
            NodeKind::Boundary => Ok(self.q_at(&st, i).unwrap_or(0.0)),
        });
        let (values, bad) = split_degenerate(results)?;
        Ok((field.with_values(values)?, bad))
    }

    /// `G u = Du . a(Du) Du` at every active node (same floor rules as
    /// [`Self::apply_q`]).
    pub fn apply_g(&self, field: &ScalarField) -> Result<ScalarField> {
        let (g, bad) = self.apply_g_regular(field)?;
        if !bad.is_empty() {
            return Err(Error::DegenerateGradient { nodes: bad });
        }
        Ok(g)
    }

    /// `G u` with zeros at sub-floor nodes, plus the offending interior nodes.
    pub fn apply_g_regular(&self, field: &ScalarField) -> Result<(ScalarField, Vec<usize>)> {
        self.check_dims(field)?;
        let grad = grid::gradient(field)?;
        let mask = field.mask();
        let results = par::map_indexed(field.grid().len(), |i| {
            if !mask.is_active(i) {
                return Ok(0.0);
            }
            let g = grad.at(i);
            if self.is_heat() {
                return Ok(g.dot(&g));
            }
            if g.norm() < self.gradient_floor {
                return if mask.kind(i) == NodeKind::Interior {
                    Err(Error::DegenerateGradient { nodes: vec![i] })
                } else {
                    Ok(0.0)
                };
            }
            let a = self.coefficients(g.as_slice())?;
            Ok(g.dot(&(a * &g)))
        });
        let (values, bad) = split_degenerate(results)?;
        Ok((field.with_values(values)?, bad))
    }

    /// Log-log regression slope of `||a(sigma xi)||_F` against `sigma`.
    pub fn estimate_alpha(&self, xi: &[f64], sigmas: &[f64]) -> Result<f64> {
        let mut xs = Vec::with_capacity(sigmas.len());
        let mut ys = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let scaled: Vec<f64> = xi.iter().map(|x| s * x).collect();
            xs.push(s.ln());
            ys.push(self.coefficients(&scaled)?.norm().ln());
        }
        fit_line(&xs, &ys, None)
            .map(|f| f.slope)
            .ok_or_else(|| Error::InsufficientData("need two distinct scales".into()))
    }

    /// Largest eigenvalue of `a(xi)`; closed forms for the built-in kinds.
    pub fn coefficient_bound(&self, xi: &[f64]) -> Result<f64> {
        let r = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        match &self.kind {
            OperatorKind::Heat => Ok(1.0),
            OperatorKind::PLaplace { p } => Ok(r.powf(p - 2.0) * (p - 1.0).max(1.0)),
            OperatorKind::NormalizedPLaplace { p } => Ok((p - 1.0).max(1.0)),
            OperatorKind::HLaplace { .. } => {
                let a = self.coefficients(xi)?;
                Ok(sym_eigenvalues(&a).last().copied().unwrap_or(0.0))
            }
        }
    }

    /// Largest eigenvalue of `a(Du)` over interior nodes.
    pub fn max_coefficient_eigenvalue(&self, field: &ScalarField) -> Result<f64> {
        self.check_dims(field)?;
        if self.is_heat() {
            return Ok(1.0);
        }
        let grad = grid::gradient(field)?;
        let interior = field.mask().interior_nodes();
        let per = par::try_map_indexed(interior.len(), |k| {
            let g = grad.at(interior[k]);
            if g.norm() < self.gradient_floor {
                return Err(Error::DegenerateGradient {
                    nodes: vec![interior[k]],
                });
            }
            self.coefficient_bound(g.as_slice())
        });
        let per = match per {
            Ok(v) => v,
            Err(Error::DegenerateGradient { .. }) => {
                return Err(Error::DegenerateGradient {
                    nodes: self.degenerate_nodes(field)?,
                })
            }
            Err(e) => return Err(e),
        };
        Ok(per.into_iter().fold(0.0, f64::max))
    }
}

fn split_degenerate(results: Vec<Result<f64>>) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut values = Vec::with_capacity(results.len());
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(Error::DegenerateGradient { nodes }) => {
                bad.extend(nodes);
                values.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((values, bad))
}

/// Divergence of `|Du|^{p-2} Du` by differencing the flux field; a
/// cross-check for the pointwise p-Laplace evaluation.
pub fn divergence_form_p_laplace(field: &ScalarField, p: f64) -> Result<ScalarField> {
    let grad = grid::gradient(field)?;
    let n = field.grid().dim();
    let mut div = vec![0.0; field.grid().len()];
    for k in 0..n {
        let flux: Vec<f64> = (0..field.grid().len())
            .map(|i| {
                if !field.mask().is_active(i) {
                    return 0.0;
                }
                let g = grad.at(i);
                g.norm().powf(p - 2.0) * g[k]
            })
            .collect();
        let flux = field.with_values(flux)?;
        let fg = grid::gradient(&flux)?;
        for (i, d) in div.iter_mut().enumerate() {
            *d += fg.component(i, k);
        }
    }
    field.with_values(div)
}
