//! Uniform Cartesian grids, masked domains and finite-difference calculus.
//!
//! Nodes are stored in row-major order (last axis fastest). Interior nodes
//! have their whole `3^N` neighbourhood inside the domain, so centred
//! first, second and mixed differences never touch exterior nodes. Boundary
//! nodes fall back to second-order one-sided stencils, or to mirrored ghost
//! values when a homogeneous Neumann condition is imposed.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    origin: Vec<f64>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, origin: Vec<f64>, spacing: Vec<f64>) -> Result<Self> {
        let dim = shape.len();
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if origin.len() != dim || spacing.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "shape, origin and spacing lengths differ ({}, {}, {})",
                dim,
                origin.len(),
                spacing.len()
            )));
        }
        if let Some(k) = shape.iter().position(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("axis {k} has no nodes")));
        }
        if let Some(k) = spacing.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid(format!("spacing on axis {k} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let mut strides = vec![1; dim];
        for k in (0..dim - 1).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        Ok(Self {
            shape,
            origin,
            spacing,
            strides,
        })
    }

    /// Grid with `points[k]` nodes spanning `[lo[k], hi[k]]` inclusive.
    pub fn spanning(lo: &[f64], hi: &[f64], points: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != points.len() {
            return Err(Error::InvalidGrid("bounds and point counts differ in length".into()));
        }
        let spacing = lo
            .iter()
            .zip(hi)
            .zip(points)
            .map(|((a, b), &n)| if n > 1 { (b - a) / (n - 1) as f64 } else { 1.0 })
            .collect();
        Self::new(points.to_vec(), lo.to_vec(), spacing)
    }

    /// Grid covering `[lo, hi]` per axis with (approximately) the given spacing.
    pub fn with_spacing(lo: &[f64], hi: &[f64], spacing: f64) -> Result<Self> {
        let points: Vec<usize> = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| ((b - a) / spacing).round() as usize + 1)
            .collect();
        Self::spanning(lo, hi, &points)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Index of node `lin` along `axis`.
    #[inline]
    pub fn index_along(&self, lin: usize, axis: usize) -> usize {
        (lin / self.strides[axis]) % self.shape[axis]
    }

    pub fn unravel(&self, lin: usize) -> Vec<usize> {
        (0..self.dim()).map(|k| self.index_along(lin, k)).collect()
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coord(&self, lin: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.origin[k] + self.index_along(lin, k) as f64 * self.spacing[k])
            .collect()
    }

    /// Neighbour `off` steps along `axis`, if it lies on the grid.
    #[inline]
    pub fn offset(&self, lin: usize, axis: usize, off: isize) -> Option<usize> {
        let i = self.index_along(lin, axis) as isize + off;
        if i < 0 || i >= self.shape[axis] as isize {
            None
        } else {
            Some((lin as isize + off * self.strides[axis] as isize) as usize)
        }
    }

    fn check_stencil_size(&self) -> Result<()> {
        match self.shape.iter().position(|&n| n < 3) {
            Some(axis) => Err(Error::AxisTooSmall {
                axis,
                len: self.shape[axis],
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Interior,
    Boundary,
    Exterior,
}

impl NodeKind {
    pub fn is_active(self) -> bool {
        self != NodeKind::Exterior
    }

    pub fn code(self) -> char {
        match self {
            NodeKind::Interior => 'I',
            NodeKind::Boundary => 'B',
            NodeKind::Exterior => 'E',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "I" => Some(NodeKind::Interior),
            "B" => Some(NodeKind::Boundary),
            "E" => Some(NodeKind::Exterior),
            _ => None,
        }
    }
}

/// Per-node interior/boundary/exterior flags plus outward normals at
/// boundary nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMask {
    kinds: Vec<NodeKind>,
    normals: Vec<f64>,
    dim: usize,
}

impl DomainMask {
    /// Every grid node belongs to the domain (a box).
    pub fn full(grid: &Grid) -> Self {
        Self::from_inside(grid, &vec![true; grid.len()])
    }

    /// Domain `{x : inside(x)}` restricted to the grid.
    pub fn from_predicate(grid: &Grid, inside: impl Fn(&[f64]) -> bool) -> Self {
        let flags: Vec<bool> = (0..grid.len()).map(|i| inside(&grid.coord(i))).collect();
        Self::from_inside(grid, &flags)
    }

    /// Derives node kinds from membership flags: a member node is interior
    /// iff its full `3^N` neighbourhood is on the grid and in the domain.
    pub fn from_inside(grid: &Grid, inside: &[bool]) -> Self {
        let offsets = neighbourhood_offsets(grid.dim());
        let kinds = (0..grid.len())
            .map(|lin| {
                if !inside[lin] {
                    return NodeKind::Exterior;
                }
                let all_in = offsets
                    .iter()
                    .all(|off| shifted(grid, lin, off).is_some_and(|j| inside[j]));
                if all_in {
                    NodeKind::Interior
                } else {
                    NodeKind::Boundary
                }
            })
            .collect();
        Self::with_normals(grid, kinds)
    }

    /// Uses explicit node kinds, validating the interior-neighbourhood rule.
    pub fn from_kinds(grid: &Grid, kinds: Vec<NodeKind>) -> Result<Self> {
        if kinds.len() != grid.len() {
            return Err(Error::InvalidField("mask length does not match grid".into()));
        }
        let offsets = neighbourhood_offsets(grid.dim());
        for lin in 0..grid.len() {
            if kinds[lin] == NodeKind::Interior {
                let ok = offsets
                    .iter()
                    .all(|off| shifted(grid, lin, off).is_some_and(|j| kinds[j].is_active()));
                if !ok {
                    return Err(Error::InvalidField(format!(
                        "interior node {lin} has a stencil neighbour outside the domain"
                    )));
                }
            }
        }
        Ok(Self::with_normals(grid, kinds))
    }

    fn with_normals(grid: &Grid, kinds: Vec<NodeKind>) -> Self {
        let dim = grid.dim();
        let mut normals = vec![0.0; grid.len() * dim];
        for lin in 0..grid.len() {
            if kinds[lin] != NodeKind::Boundary {
                continue;
            }
            let n = &mut normals[lin * dim..(lin + 1) * dim];
            for (k, nk) in n.iter_mut().enumerate() {
                let missing = |off| !grid.offset(lin, k, off).is_some_and(|j| kinds[j].is_active());
                if missing(1) {
                    *nk += 1.0;
                }
                if missing(-1) {
                    *nk -= 1.0;
                }
            }
            let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                n.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Self { kinds, normals, dim }
    }

    pub fn kind(&self, lin: usize) -> NodeKind {
        self.kinds[lin]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn is_active(&self, lin: usize) -> bool {
        self.kinds[lin].is_active()
    }

    /// Outward unit normal at a boundary node (zero vector elsewhere, or at
    /// boundary nodes whose missing neighbours cancel).
    pub fn normal(&self, lin: usize) -> &[f64] {
        &self.normals[lin * self.dim..(lin + 1) * self.dim]
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        self.nodes_of(NodeKind::Interior)
    }

    pub fn nodes_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| self.kinds[i] == kind).collect()
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| self.kinds[i].is_active()).collect()
    }
}

fn neighbourhood_offsets(dim: usize) -> Vec<Vec<isize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|v| {
                (-1..=1).map(move |d| {
                    let mut w = v.clone();
                    w.push(d);
                    w
                })
            })
            .collect();
    }
    out.retain(|v| v.iter().any(|&d| d != 0));
    out
}

fn shifted(grid: &Grid, lin: usize, off: &[isize]) -> Option<usize> {
    let mut j = lin;
    for (k, &d) in off.iter().enumerate() {
        if d != 0 {
            j = grid.offset(j, k, d)?;
        }
    }
    Some(j)
}

/// Grid-sampled scalar field over a masked domain. Exterior entries are
/// stored as zero and never read by the difference operators.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    mask: Arc<DomainMask>,
    values: Vec<f64>,
    time: Option<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, mask: Arc<DomainMask>, mut values: Vec<f64>, time: Option<f64>) -> Result<Self> {
        if values.len() != grid.len() || mask.kinds.len() != grid.len() {
            return Err(Error::InvalidField(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter_mut().enumerate() {
            if !mask.is_active(i) {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::InvalidField(format!("non-finite value at node {i}")));
            }
        }
        Ok(Self {
            grid,
            mask,
            values,
            time,
        })
    }

    /// Samples `f` at every active node.
    pub fn from_fn(
        grid: Arc<Grid>,
        mask: Arc<DomainMask>,
        time: Option<f64>,
        f: impl Fn(&[f64]) -> f64 + Sync + Send,
    ) -> Result<Self> {
        let values = par::map_indexed(grid.len(), |i| if mask.is_active(i) { f(&grid.coord(i)) } else { 0.0 });
        Self::new(grid, mask, values, time)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    pub fn mask_arc(&self) -> &Arc<DomainMask> {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, lin: usize) -> f64 {
        self.values[lin]
    }

    pub fn time(&self) -> Option<f64> {
        self.time
    }

    pub fn with_time(mut self, t: Option<f64>) -> Self {
        self.time = t;
        self
    }

    /// Same grid and mask, new values (exterior entries are zeroed).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), self.mask.clone(), values, self.time)
    }

    /// Applies `f` to every active value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.mask.is_active(i) { f(v) } else { 0.0 })
            .collect();
        self.with_values(values)
    }

    pub fn shares_domain(&self, other: &ScalarField) -> bool {
        (Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid)
            && (Arc::ptr_eq(&self.mask, &other.mask) || *self.mask == *other.mask)
    }

    /// `(min, max)` over active nodes.
    pub fn range(&self) -> (f64, f64) {
        self.active_values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn active_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask.is_active(*i))
            .map(|(_, &v)| v)
    }

    /// Discrete mass: trapezoid-weighted sum of active values times the cell
    /// volume. Half weights apply along every axis where a neighbour is
    /// missing, which is the quantity conserved by the mirrored Neumann
    /// Laplacian.
    pub fn mass(&self) -> f64 {
        let g = &*self.grid;
        let cell: f64 = g.spacing.iter().product();
        let terms: Vec<f64> = (0..g.len())
            .filter(|&i| self.mask.is_active(i))
            .map(|i| {
                let mut w = 1.0;
                for k in 0..g.dim() {
                    let active = |off| g.offset(i, k, off).is_some_and(|j| self.mask.is_active(j));
                    if !active(1) || !active(-1) {
                        w *= 0.5;
                    }
                }
                w * self.values[i]
            })
            .collect();
        crate::numeric::pairwise_sum(&terms) * cell
    }

    pub(crate) fn stencil(&self, mode: BoundaryStencil) -> Stencil<'_> {
        Stencil {
            grid: &self.grid,
            mask: &self.mask,
            values: &self.values,
            mode,
        }
    }
}

/// How derivatives are taken at boundary nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryStencil {
    /// Second-order one-sided differences.
    OneSided,
    /// Missing neighbours replaced by their mirror images (`u_nu = 0`).
    Mirror,
}

/// Borrowed view used by all difference formulas.
#[derive(Clone, Copy)]
pub(crate) struct Stencil<'a> {
    pub grid: &'a Grid,
    pub mask: &'a DomainMask,
    pub values: &'a [f64],
    pub mode: BoundaryStencil,
}

/// Up to three (node, weight) pairs of a one-dimensional stencil.
type Taps = ([(usize, f64); 3], usize);

impl Stencil<'_> {
    #[inline]
    fn avail(&self, lin: usize, axis: usize, off: isize) -> Option<usize> {
        self.grid.offset(lin, axis, off).filter(|&j| self.mask.is_active(j))
    }

    /// First-derivative stencil along `axis` at `lin` (weights include 1/h).
    fn d1_taps(&self, lin: usize, axis: usize) -> Taps {
        let h = self.grid.spacing[axis];
        let zero = (lin, 0.0);
        let p = self.avail(lin, axis, 1);
        let m = self.avail(lin, axis, -1);
        match (m, p) {
            (Some(m), Some(p)) => ([(p, 0.5 / h), (m, -0.5 / h), zero], 2),
            _ if self.mode == BoundaryStencil::Mirror => ([zero; 3], 0),
            (None, Some(p)) => match self.avail(lin, axis, 2) {
                Some(p2) => ([(lin, -1.5 / h), (p, 2.0 / h), (p2, -0.5 / h)], 3),
                None => ([(p, 1.0 / h), (lin, -1.0 / h), zero], 2),
            },
            (Some(m), None) => match self.avail(lin, axis, -2) {
                Some(m2) => ([(lin, 1.5 / h), (m, -2.0 / h), (m2, 0.5 / h)], 3),
                None => ([(lin, 1.0 / h), (m, -1.0 / h), zero], 2),
            },
            (None, None) => ([zero; 3], 0),
        }
    }

    #[inline]
    fn apply(&self, taps: &Taps) -> f64 {
        taps.0[..taps.1]
            .iter()
            .fold(0.0, |acc, &(j, w)| acc + w * self.values[j])
    }

    pub fn d1(&self, lin: usize, axis: usize) -> f64 {
        self.apply(&self.d1_taps(lin, axis))
    }

    pub fn d2(&self, lin: usize, axis: usize) -> f64 {
        let h2 = self.grid.spacing[axis] * self.grid.spacing[axis];
        let v = self.values;
        let u0 = v[lin];
        let p = self.avail(lin, axis, 1);
        let m = self.avail(lin, axis, -1);
        match (m, p) {
            (Some(m), Some(p)) => (v[p] - 2.0 * u0 + v[m]) / h2,
            (None, Some(p)) | (Some(p), None) if self.mode == BoundaryStencil::Mirror => (2.0 * v[p] - 2.0 * u0) / h2,
            (None, Some(p)) => {
                let dir = 1;
                match (self.avail(lin, axis, 2 * dir), self.avail(lin, axis, 3 * dir)) {
                    (Some(p2), Some(p3)) => (2.0 * u0 - 5.0 * v[p] + 4.0 * v[p2] - v[p3]) / h2,
                    (Some(p2), None) => (u0 - 2.0 * v[p] + v[p2]) / h2,
                    _ => 0.0,
                }
            }
            (Some(m), None) => {
                let dir = -1;
                match (self.avail(lin, axis, 2 * dir), self.avail(lin, axis, 3 * dir)) {
                    (Some(m2), Some(m3)) => (2.0 * u0 - 5.0 * v[m] + 4.0 * v[m2] - v[m3]) / h2,
                    (Some(m2), None) => (u0 - 2.0 * v[m] + v[m2]) / h2,
                    _ => 0.0,
                }
            }
            (None, None) => 0.0,
        }
    }

    /// Mixed partial `d^2/dx_k dx_l` as the `l`-derivative stencil applied
    /// to `k`-derivatives at the neighbouring nodes.
    pub fn d_mixed(&self, lin: usize, k: usize, l: usize) -> f64 {
        let taps = self.d1_taps(lin, l);
        taps.0[..taps.1]
            .iter()
            .fold(0.0, |acc, &(j, w)| acc + w * self.d1(j, k))
    }

    pub fn gradient_at(&self, lin: usize) -> DVector<f64> {
        DVector::from_iterator(self.grid.dim(), (0..self.grid.dim()).map(|k| self.d1(lin, k)))
    }

    pub fn hessian_at(&self, lin: usize) -> DMatrix<f64> {
        let n = self.grid.dim();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            h[(k, k)] = self.d2(lin, k);
            for l in k + 1..n {
                let v = self.d_mixed(lin, k, l);
                h[(k, l)] = v;
                h[(l, k)] = v;
            }
        }
        h
    }

    /// Fourth-order centred first derivative when the five-point stencil is
    /// active, else `None`.
    fn d1_wide(&self, lin: usize, axis: usize) -> Option<f64> {
        let h = self.grid.spacing[axis];
        let v = self.values;
        let [m2, m1, p1, p2] = [-2, -1, 1, 2].map(|o| self.avail(lin, axis, o));
        Some((v[m2?] - 8.0 * v[m1?] + 8.0 * v[p1?] - v[p2?]) / (12.0 * h))
    }

    fn d2_wide(&self, lin: usize, axis: usize) -> Option<f64> {
        let h = self.grid.spacing[axis];
        let v = self.values;
        let [m2, m1, p1, p2] = [-2, -1, 1, 2].map(|o| self.avail(lin, axis, o));
        Some((-v[m2?] + 16.0 * v[m1?] - 30.0 * v[lin] + 16.0 * v[p1?] - v[p2?]) / (12.0 * h * h))
    }

    fn d_mixed_wide(&self, lin: usize, k: usize, l: usize) -> Option<f64> {
        let h = self.grid.spacing[l];
        let [m2, m1, p1, p2] = [-2, -1, 1, 2].map(|o| self.avail(lin, l, o));
        let [a, b, c, d] = [m2?, m1?, p1?, p2?].map(|j| self.d1_wide(j, k));
        Some((a? - 8.0 * b? + 8.0 * c? - d?) / (12.0 * h))
    }

    pub fn gradient_wide_at(&self, lin: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.grid.dim(),
            (0..self.grid.dim()).map(|k| self.d1_wide(lin, k).unwrap_or_else(|| self.d1(lin, k))),
        )
    }

    pub fn hessian_wide_at(&self, lin: usize) -> DMatrix<f64> {
        let n = self.grid.dim();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            h[(k, k)] = self.d2_wide(lin, k).unwrap_or_else(|| self.d2(lin, k));
            for l in k + 1..n {
                let v = self.d_mixed_wide(lin, k, l).unwrap_or_else(|| self.d_mixed(lin, k, l));
                h[(k, l)] = v;
                h[(l, k)] = v;
            }
        }
        h
    }

    pub fn laplacian_at(&self, lin: usize) -> f64 {
        (0..self.grid.dim()).fold(0.0, |acc, k| acc + self.d2(lin, k))
    }
}

/// Vector field stored flat (`N` components per node).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Arc<Grid>,
    mask: Arc<DomainMask>,
    data: Vec<f64>,
}

impl VectorField {
    pub fn at(&self, lin: usize) -> DVector<f64> {
        let n = self.grid.dim();
        DVector::from_column_slice(&self.data[lin * n..(lin + 1) * n])
    }

    pub fn component(&self, lin: usize, k: usize) -> f64 {
        self.data[lin * self.grid.dim() + k]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    /// Multilinear interpolation of every component at `point`.
    pub fn interpolate(&self, point: &[f64]) -> Result<DVector<f64>> {
        let n = self.grid.dim();
        let w = cell_weights(&self.grid, &self.mask, point)?;
        let mut out = DVector::zeros(n);
        for (j, wj) in w {
            for k in 0..n {
                out[k] += wj * self.data[j * n + k];
            }
        }
        Ok(out)
    }
}

/// Symmetric-matrix field stored flat (`N*N` entries per node, column-major).
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixField {
    grid: Arc<Grid>,
    mask: Arc<DomainMask>,
    data: Vec<f64>,
}

impl MatrixField {
    pub fn at(&self, lin: usize) -> DMatrix<f64> {
        let n = self.grid.dim();
        DMatrix::from_column_slice(n, n, &self.data[lin * n * n..(lin + 1) * n * n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn interpolate(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.grid.dim();
        let w = cell_weights(&self.grid, &self.mask, point)?;
        let mut out = DMatrix::zeros(n, n);
        for (j, wj) in w {
            for e in 0..n * n {
                out[e] += wj * self.data[j * n * n + e];
            }
        }
        Ok(out)
    }
}

/// Second-order gradient at every active node (zero at exterior nodes).
pub fn gradient(field: &ScalarField) -> Result<VectorField> {
    gradient_with(field, BoundaryStencil::OneSided)
}

pub(crate) fn gradient_with(field: &ScalarField, mode: BoundaryStencil) -> Result<VectorField> {
    field.grid.check_stencil_size()?;
    let n = field.grid.dim();
    let st = field.stencil(mode);
    let per_node = par::map_indexed(field.grid.len(), |i| {
        let mut g = vec![0.0; n];
        if field.mask.is_active(i) {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = st.d1(i, k);
            }
        }
        g
    });
    Ok(VectorField {
        grid: field.grid.clone(),
        mask: field.mask.clone(),
        data: per_node.concat(),
    })
}

/// Second-order Hessian at every active node; exactly symmetric.
pub fn hessian(field: &ScalarField) -> Result<MatrixField> {
    field.grid.check_stencil_size()?;
    let n = field.grid.dim();
    let st = field.stencil(BoundaryStencil::OneSided);
    let per_node = par::map_indexed(field.grid.len(), |i| {
        if field.mask.is_active(i) {
            st.hessian_at(i).as_slice().to_vec()
        } else {
            vec![0.0; n * n]
        }
    });
    Ok(MatrixField {
        grid: field.grid.clone(),
        mask: field.mask.clone(),
        data: per_node.concat(),
    })
}

/// Fourth-order centred gradient and Hessian wherever the five-point
/// stencils are active, second-order elsewhere.
pub fn derivatives_wide(field: &ScalarField) -> Result<(VectorField, MatrixField)> {
    field.grid.check_stencil_size()?;
    let n = field.grid.dim();
    let st = field.stencil(BoundaryStencil::OneSided);
    let per_node = par::map_indexed(field.grid.len(), |i| {
        if field.mask.is_active(i) {
            (
                st.gradient_wide_at(i).as_slice().to_vec(),
                st.hessian_wide_at(i).as_slice().to_vec(),
            )
        } else {
            (vec![0.0; n], vec![0.0; n * n])
        }
    });
    let (g, h): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_node.into_iter().unzip();
    Ok((
        VectorField {
            grid: field.grid.clone(),
            mask: field.mask.clone(),
            data: g.concat(),
        },
        MatrixField {
            grid: field.grid.clone(),
            mask: field.mask.clone(),
            data: h.concat(),
        },
    ))
}

/// Sum of the unmixed second differences; bitwise equal to the trace of
/// [`hessian`].
pub fn laplacian(field: &ScalarField) -> Result<ScalarField> {
    laplacian_with(field, BoundaryStencil::OneSided)
}

pub(crate) fn laplacian_with(field: &ScalarField, mode: BoundaryStencil) -> Result<ScalarField> {
    field.grid.check_stencil_size()?;
    let st = field.stencil(mode);
    let values = par::map_indexed(field.grid.len(), |i| {
        if field.mask.is_active(i) {
            st.laplacian_at(i)
        } else {
            0.0
        }
    });
    field.with_values(values)
}

/// Multilinear weights of the cell containing `point`.
pub(crate) fn cell_weights(grid: &Grid, mask: &DomainMask, point: &[f64]) -> Result<Vec<(usize, f64)>> {
    let n = grid.dim();
    if point.len() != n {
        return Err(Error::InvalidField(format!(
            "point has {} coordinates, grid has dimension {n}",
            point.len()
        )));
    }
    let mut base = vec![0usize; n];
    let mut frac = vec![0.0; n];
    for k in 0..n {
        let r = (point[k] - grid.origin[k]) / grid.spacing[k];
        let last = (grid.shape[k] - 1) as f64;
        let tol = 1e-9;
        if !(r >= -tol && r <= last + tol) {
            return Err(Error::OutsideDomain);
        }
        let mut r = r.clamp(0.0, last);
        // snap round-off so node coordinates reproduce node values exactly
        if (r - r.round()).abs() < 1e-10 {
            r = r.round();
        }
        if grid.shape[k] == 1 {
            base[k] = 0;
            frac[k] = 0.0;
            continue;
        }
        let i = (r.floor() as usize).min(grid.shape[k] - 2);
        base[k] = i;
        frac[k] = r - i as f64;
    }
    let mut out = Vec::with_capacity(1 << n);
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut idx = 0;
        for k in 0..n {
            let bit = (corner >> k) & 1;
            if bit == 1 && grid.shape[k] == 1 {
                w = 0.0;
                break;
            }
            w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            idx += (base[k] + bit) * grid.strides[k];
        }
        if w == 0.0 {
            continue;
        }
        if !mask.is_active(idx) {
            return Err(Error::OutsideDomain);
        }
        out.push((idx, w));
    }
    Ok(out)
}

/// Multilinear interpolation; exact on nodes and on affine fields.
pub fn interpolate(field: &ScalarField, point: &[f64]) -> Result<f64> {
    let w = cell_weights(&field.grid, &field.mask, point)?;
    Ok(w.iter().fold(0.0, |acc, &(j, wj)| acc + wj * field.values[j]))
}

/// Tensor-product cubic Lagrange interpolation of the value and gradient at
/// `point`. Fourth-order accurate for values, third-order for the gradient;
/// requires the 4^N supporting nodes to be active.
pub fn interpolate_cubic(field: &ScalarField, point: &[f64]) -> Result<(f64, DVector<f64>)> {
    let grid = &*field.grid;
    let n = grid.dim();
    if point.len() != n {
        return Err(Error::OutsideDomain);
    }
    let mut base = vec![0usize; n];
    let mut w = vec![[0.0; 4]; n];
    let mut dw = vec![[0.0; 4]; n];
    for k in 0..n {
        if grid.shape[k] < 4 {
            return Err(Error::AxisTooSmall {
                axis: k,
                len: grid.shape[k],
            });
        }
        let r = (point[k] - grid.origin[k]) / grid.spacing[k];
        let last = (grid.shape[k] - 1) as f64;
        if !(r >= -1e-9 && r <= last + 1e-9) {
            return Err(Error::OutsideDomain);
        }
        let i = (r.floor() as isize - 1).clamp(0, grid.shape[k] as isize - 4) as usize;
        base[k] = i;
        let x = r - i as f64; // local coordinate, nodes at 0,1,2,3
        let nodes = [0.0, 1.0, 2.0, 3.0];
        for a in 0..4 {
            let mut num = 1.0;
            let mut den = 1.0;
            let mut dsum = 0.0;
            for b in 0..4 {
                if b != a {
                    num *= x - nodes[b];
                    den *= nodes[a] - nodes[b];
                }
            }
            for c in 0..4 {
                if c == a {
                    continue;
                }
                dsum += nodes
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a && b != c)
                    .fold(1.0, |p, (_, &nb)| p * (x - nb));
            }
            w[k][a] = num / den;
            dw[k][a] = dsum / den / grid.spacing[k];
        }
    }
    let mut value = 0.0;
    let mut grad = DVector::zeros(n);
    let total = 4usize.pow(n as u32);
    for c in 0..total {
        let mut rem = c;
        let mut idx = 0;
        let mut sel = vec![0usize; n];
        for k in 0..n {
            sel[k] = rem % 4;
            rem /= 4;
            idx += (base[k] + sel[k]) * grid.strides[k];
        }
        if !field.mask.is_active(idx) {
            return Err(Error::OutsideDomain);
        }
        let v = field.values[idx];
        let mut prod = 1.0;
        for k in 0..n {
            prod *= w[k][sel[k]];
        }
        value += prod * v;
        for d in 0..n {
            let mut p = 1.0;
            for k in 0..n {
                p *= if k == d { dw[k][sel[k]] } else { w[k][sel[k]] };
            }
            grad[d] += p * v;
        }
    }
    Ok((value, grad))
}

/// Linear-interpolation crossings of the level `s` along every grid edge
/// joining two active nodes, plus active nodes lying exactly on the level.
pub fn level_set_points(field: &ScalarField, s: f64) -> Vec<Vec<f64>> {
    let grid = &*field.grid;
    let (lo, hi) = field.range();
    if !(s >= lo && s <= hi) {
        return Vec::new();
    }
    let per_node = par::map_indexed(grid.len(), |i| {
        let mut pts = Vec::new();
        if !field.mask.is_active(i) {
            return pts;
        }
        let vi = field.values[i] - s;
        if vi == 0.0 {
            pts.push(grid.coord(i));
            return pts;
        }
        for k in 0..grid.dim() {
            if let Some(j) = grid.offset(i, k, 1).filter(|&j| field.mask.is_active(j)) {
                let vj = field.values[j] - s;
                if vj != 0.0 && (vi < 0.0) != (vj < 0.0) {
                    let t = vi / (vi - vj);
                    let mut p = grid.coord(i);
                    p[k] += t * grid.spacing[k];
                    pts.push(p);
                }
            }
        }
        pts
    });
    per_node.into_iter().flatten().collect()
}

/// Snapshots sharing one grid and mask, at strictly increasing times; the
/// first time is the reference time.
#[derive(Clone, Debug)]
pub struct TimeSeriesField {
    snapshots: Vec<ScalarField>,
    times: Vec<f64>,
}

impl TimeSeriesField {
    /// Uses each snapshot's time tag.
    pub fn new(snapshots: Vec<ScalarField>) -> Result<Self> {
        let times = snapshots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.time
                    .ok_or_else(|| Error::InvalidField(format!("snapshot {i} has no time tag")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_times(snapshots, times)
    }

    pub fn with_times(snapshots: Vec<ScalarField>, times: Vec<f64>) -> Result<Self> {
        if snapshots.is_empty() || snapshots.len() != times.len() {
            return Err(Error::InvalidField(
                "series needs one time per snapshot and at least one snapshot".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidField("snapshot times must be strictly increasing".into()));
        }
        if snapshots.iter().any(|s| !s.shares_domain(&snapshots[0])) {
            return Err(Error::InvalidField("snapshots must share grid and mask".into()));
        }
        let snapshots = snapshots
            .into_iter()
            .zip(&times)
            .map(|(s, &t)| s.with_time(Some(t)))
            .collect();
        Ok(Self { snapshots, times })
    }

    /// Samples `u(x, t)` at the given times.
    pub fn from_fn(
        grid: Arc<Grid>,
        mask: Arc<DomainMask>,
        times: &[f64],
        u: impl Fn(&[f64], f64) -> f64 + Sync + Send,
    ) -> Result<Self> {
        let snaps = times
            .iter()
            .map(|&t| ScalarField::from_fn(grid.clone(), mask.clone(), Some(t), |x| u(x, t)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_times(snaps, times.to_vec())
    }

    pub fn snapshots(&self) -> &[ScalarField] {
        &self.snapshots
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn reference(&self) -> &ScalarField {
        &self.snapshots[0]
    }

    pub fn tau(&self) -> f64 {
        self.times[0]
    }

    /// Drops the first `k` snapshots, moving the reference time forward.
    pub fn rebased(&self, k: usize) -> Result<Self> {
        Self::with_times(self.snapshots[k..].to_vec(), self.times[k..].to_vec())
    }

    /// Applies `u -> c u + d` to every snapshot.
    pub fn affine_map(&self, c: f64, d: f64) -> Result<Self> {
        let snaps = self
            .snapshots
            .iter()
            .map(|s| s.map(|v| c * v + d))
            .collect::<Result<Vec<_>>>()?;
        Self::with_times(snaps, self.times.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn field_2d(n: usize, lo: f64, hi: f64, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> ScalarField {
        let g = Arc::new(Grid::spanning(&[lo, lo], &[hi, hi], &[n, n]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        ScalarField::from_fn(g, m, None, f).unwrap()
    }

    fn field_1d(lo: f64, hi: f64, h: f64, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> ScalarField {
        let g = Arc::new(Grid::with_spacing(&[lo], &[hi], h).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        ScalarField::from_fn(g, m, None, f).unwrap()
    }

    #[test]
    fn grid_rejects_bad_spacing() {
        assert!(Grid::new(vec![3, 3], vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
        assert!(Grid::new(vec![3], vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn coordinates_follow_origin_and_spacing() {
        let g = Grid::new(vec![4, 5], vec![-1.0, 2.0], vec![0.5, 0.25]).unwrap();
        assert_eq!(g.len(), 20);
        let lin = g.ravel(&[3, 2]);
        assert_eq!(g.unravel(lin), vec![3, 2]);
        assert_eq!(g.coord(lin), vec![0.5, 2.5]);
    }

    #[test]
    fn box_mask_edges_are_boundary() {
        let g = Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[5, 5]).unwrap();
        let m = DomainMask::full(&g);
        assert_eq!(m.count(NodeKind::Interior), 9);
        assert_eq!(m.count(NodeKind::Boundary), 16);
        let corner = g.ravel(&[0, 4]);
        let n = m.normal(corner);
        assert_relative_eq!(n[0], -(0.5f64).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(n[1], (0.5f64).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ball_mask_respects_interior_rule() {
        let g = Grid::spanning(&[-1.0, -1.0], &[1.0, 1.0], &[41, 41]).unwrap();
        let m = DomainMask::from_predicate(&g, |x| x[0] * x[0] + x[1] * x[1] <= 0.8);
        assert!(DomainMask::from_kinds(&g, m.kinds().to_vec()).is_ok());
        let mut bad = m.kinds().to_vec();
        let b = m.nodes_of(NodeKind::Boundary)[0];
        bad[b] = NodeKind::Exterior;
        assert!(DomainMask::from_kinds(&g, bad).is_err());
    }

    #[test]
    fn axis_too_small() {
        let g = Arc::new(Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[2, 5]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let f = ScalarField::from_fn(g, m, None, |x| x[0]).unwrap();
        assert!(matches!(gradient(&f), Err(Error::AxisTooSmall { axis: 0, len: 2 })));
        assert!(hessian(&f).is_err());
        assert!(laplacian(&f).is_err());
    }

    #[test]
    fn gradient_of_constant_and_affine() {
        let c = field_2d(7, -1.0, 1.0, |_| 5.0);
        let g = gradient(&c).unwrap();
        assert!((0..c.grid().len()).all(|i| g.at(i).norm() == 0.0));

        let a = field_2d(7, -1.0, 1.0, |x| x[0]);
        let g = gradient(&a).unwrap();
        for i in 0..a.grid().len() {
            assert_relative_eq!(g.component(i, 0), 1.0, epsilon = 1e-12);
            assert_relative_eq!(g.component(i, 1), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_sine() {
        let f = field_1d(0.0, 3.0, 0.01, |x| x[0].sin());
        let g = gradient(&f).unwrap();
        let err = (0..f.grid().len())
            .filter(|&i| f.mask().kind(i) == NodeKind::Interior)
            .map(|i| (g.component(i, 0) - f.grid().coord(i)[0].cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 2e-5, "err = {err}");
    }

    #[test]
    fn hessian_exact_on_quadratics() {
        let f = field_2d(9, -1.0, 1.0, |x| x[0] * x[1]);
        let h = hessian(&f).unwrap();
        for i in 0..f.grid().len() {
            let m = h.at(i);
            assert_relative_eq!(m[(0, 1)], 1.0, epsilon = 1e-11);
            assert_relative_eq!(m[(1, 0)], 1.0, epsilon = 1e-11);
            assert!(m[(0, 0)].abs() < 1e-10 && m[(1, 1)].abs() < 1e-10);
        }
        let f = field_2d(9, -1.0, 1.0, |x| x[0] * x[0] + x[1] * x[1]);
        let h = hessian(&f).unwrap();
        for i in 0..f.grid().len() {
            assert_relative_eq!(h.at(i), DMatrix::identity(2, 2) * 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn hessian_of_trig_product() {
        let f = field_2d(201, 0.0, 2.0, |x| x[0].sin() * x[1].cos());
        let h = hessian(&f).unwrap();
        let mut err: f64 = 0.0;
        for i in f.mask().interior_nodes() {
            let x = f.grid().coord(i);
            let (s0, c0, s1, c1) = (x[0].sin(), x[0].cos(), x[1].sin(), x[1].cos());
            let exact = DMatrix::from_row_slice(2, 2, &[-s0 * c1, -c0 * s1, -c0 * s1, -s0 * c1]);
            err = err.max((h.at(i) - exact).abs().max());
        }
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn laplacian_cases() {
        let g = Arc::new(Grid::spanning(&[-1.0; 3], &[1.0; 3], &[9, 9, 9]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let f = ScalarField::from_fn(g, m, None, |x| x.iter().map(|v| v * v).sum()).unwrap();
        let l = laplacian(&f).unwrap();
        assert!(l.active_values().all(|v| (v - 6.0).abs() < 1e-10));

        let f = field_2d(11, -1.0, 1.0, |x| x[0] * x[0] - x[1] * x[1]);
        let l = laplacian(&f).unwrap();
        assert!(l.active_values().all(|v| v.abs() < 1e-10));

        let f = field_1d(0.0, 3.0, 0.01, |x| x[0].sin());
        let l = laplacian(&f).unwrap();
        let err = f
            .mask()
            .interior_nodes()
            .into_iter()
            .map(|i| (l.value(i) + f.value(i)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-4);
    }

    #[test]
    fn trace_of_hessian_is_laplacian_bitwise() {
        let f = field_2d(31, -1.0, 1.0, |x| (x[0] * 1.3).exp() * (x[1] + 0.2).sin());
        let h = hessian(&f).unwrap();
        let l = laplacian(&f).unwrap();
        for i in 0..f.grid().len() {
            let m = h.at(i);
            assert_eq!(m[(0, 0)] + m[(1, 1)], l.value(i));
        }
    }

    #[test]
    fn interpolation_identities() {
        let f = field_2d(11, -1.0, 1.0, |x| 2.0 * x[0] + 1.0 + 0.3 * x[1]);
        assert_eq!(interpolate(&f, &f.grid().coord(17)).unwrap(), f.value(17));
        let p = [0.123, -0.456];
        assert_relative_eq!(
            interpolate(&f, &p).unwrap(),
            2.0 * p[0] + 1.0 + 0.3 * p[1],
            epsilon = 1e-12
        );
        let q = field_2d(3, 0.0, 2.0, |x| x[0] * x[0] * x[1] + 3.0 * x[1]);
        let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mean: f64 = corners.iter().map(|c| c[0] * c[0] * c[1] + 3.0 * c[1]).sum::<f64>() / 4.0;
        assert_relative_eq!(interpolate(&q, &[0.5, 0.5]).unwrap(), mean, epsilon = 1e-14);
        assert!(matches!(interpolate(&f, &[2.0, 0.0]), Err(Error::OutsideDomain)));
    }

    #[test]
    fn interpolation_rejects_exterior_cells() {
        let g = Arc::new(Grid::spanning(&[-1.0, -1.0], &[1.0, 1.0], &[21, 21]).unwrap());
        let m = Arc::new(DomainMask::from_predicate(&g, |x| x[0] * x[0] + x[1] * x[1] <= 0.5));
        let f = ScalarField::from_fn(g, m, None, |x| x[0]).unwrap();
        assert!(interpolate(&f, &[0.0, 0.0]).is_ok());
        assert!(matches!(interpolate(&f, &[0.95, 0.95]), Err(Error::OutsideDomain)));
    }

    #[test]
    fn cubic_interpolation_is_accurate() {
        let f = field_2d(41, -1.0, 1.0, |x| (x[0] * 0.7).sin() * (x[1] * 1.1).exp());
        let p = [0.3137, -0.2718];
        let (v, g) = interpolate_cubic(&f, &p).unwrap();
        let exact = (p[0] * 0.7).sin() * (p[1] * 1.1).exp();
        assert!((v - exact).abs() < 1e-7);
        let gx = 0.7 * (p[0] * 0.7).cos() * (p[1] * 1.1).exp();
        assert!((g[0] - gx).abs() < 1e-5);
    }

    #[test]
    fn level_set_of_coordinate_is_hyperplane() {
        let f = field_2d(21, -1.0, 1.0, |x| x[0]);
        let pts = level_set_points(&f, 0.0);
        assert_eq!(pts.len(), 21);
        assert!(pts.iter().all(|p| p[0].abs() < 1e-15));
        assert!(level_set_points(&f, 2.0).is_empty());
    }

    #[test]
    fn level_set_of_radius_is_circle() {
        let f = field_2d(151, -1.5, 1.5, |x| (x[0] * x[0] + x[1] * x[1]).sqrt());
        let pts = level_set_points(&f, 1.0);
        assert!(pts.len() > 100);
        for p in &pts {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() <= 5e-4, "r = {r}");
            assert!((interpolate(&f, p).unwrap() - 1.0).abs() <= 0.02 * 0.02);
        }
    }

    #[test]
    fn series_validation() {
        let g = Arc::new(Grid::spanning(&[0.0], &[1.0], &[5]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let s = |t| ScalarField::from_fn(g.clone(), m.clone(), Some(t), |x| x[0]).unwrap();
        assert!(TimeSeriesField::new(vec![s(0.1), s(0.2)]).is_ok());
        assert!(TimeSeriesField::new(vec![s(0.2), s(0.2)]).is_err());
        assert!(TimeSeriesField::new(vec![s(0.3), s(0.2)]).is_err());
    }
}
