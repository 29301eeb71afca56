//! Support functions of convex bodies and the derived `H = h^2 / 2` calculus.
//!
//! Built-in bodies carry analytic first and second derivatives. Custom bodies
//! supply `h` and optionally its derivatives; missing derivatives are taken
//! by central differences with step `1e-5 |xi|`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{orthogonal_complement, sym_eigenvalues};

pub type SupportFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SupportGradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type SupportHessianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CustomBody {
    pub support: SupportFn,
    pub gradient: Option<SupportGradientFn>,
    pub hessian: Option<SupportHessianFn>,
}

impl fmt::Debug for CustomBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomBody")
            .field("gradient", &self.gradient.is_some())
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum BodyKind {
    EuclideanBall,
    /// `h(xi) = sqrt(xi^T A xi)` for symmetric positive-definite `A`.
    Ellipsoid {
        a: DMatrix<f64>,
    },
    /// `h(xi) = |xi| + eps (xi^T B xi) / |xi|`.
    PerturbedBall {
        eps: f64,
        b: DMatrix<f64>,
    },
    Custom(CustomBody),
}

#[derive(Clone, Debug)]
pub struct ConvexBody {
    dim: usize,
    kind: BodyKind,
}

/// JSON description of a body, e.g. `{"kind":"ellipsoid","A":[[4,0],[0,1]]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BodySpec {
    EuclideanBall {},
    Ellipsoid {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
    },
    PerturbedBall {
        eps: f64,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidBody(format!("{name} must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::InvalidBody(format!("{name} must be symmetric")));
    }
    Ok(m)
}

impl BodySpec {
    pub fn build(&self, dim: usize) -> Result<ConvexBody> {
        match self {
            BodySpec::EuclideanBall {} => Ok(ConvexBody::euclidean_ball(dim)),
            BodySpec::Ellipsoid { a } => ConvexBody::ellipsoid(matrix_from_rows(a, dim, "A")?),
            BodySpec::PerturbedBall { eps, b } => ConvexBody::perturbed_ball(*eps, matrix_from_rows(b, dim, "B")?),
        }
    }
}

/// Outcome of the sampled C^2_+ test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2PlusReport {
    pub pass: bool,
    /// Smallest eigenvalue of `D^2 h(nu)` on the orthogonal complement of
    /// `nu`, over all sampled directions.
    pub min_tangential_eigenvalue: f64,
    /// Largest `|D^2 h(nu) nu|` seen.
    pub max_normal_leak: f64,
    pub min_support: f64,
}

impl ConvexBody {
    pub fn euclidean_ball(dim: usize) -> Self {
        Self {
            dim,
            kind: BodyKind::EuclideanBall,
        }
    }

    pub fn ellipsoid(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidBody("A must be square".into()));
        }
        let ev = sym_eigenvalues(&a);
        if ev.first().is_none_or(|&l| l <= 0.0) {
            return Err(Error::InvalidBody("A must be positive definite".into()));
        }
        Ok(Self {
            dim: a.nrows(),
            kind: BodyKind::Ellipsoid { a },
        })
    }

    /// `h > 0` off the origin requires `eps * lambda_min(B) > -1`; convexity
    /// is not checked here (see [`ConvexBody::check_c2_plus`]).
    pub fn perturbed_ball(eps: f64, b: DMatrix<f64>) -> Result<Self> {
        if !b.is_square() {
            return Err(Error::InvalidBody("B must be square".into()));
        }
        let ev = sym_eigenvalues(&b);
        let worst = ev.iter().map(|l| 1.0 + eps * l).fold(f64::INFINITY, f64::min);
        if !(worst > 0.0) {
            return Err(Error::InvalidBody("support function must stay positive".into()));
        }
        Ok(Self {
            dim: b.nrows(),
            kind: BodyKind::PerturbedBall { eps, b },
        })
    }

    pub fn custom(dim: usize, body: CustomBody) -> Self {
        Self {
            dim,
            kind: BodyKind::Custom(body),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &BodyKind {
        &self.kind
    }

    pub fn is_euclidean_ball(&self) -> bool {
        matches!(self.kind, BodyKind::EuclideanBall)
    }

    fn check(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::InvalidBody(format!(
                "argument has {} components, body dimension is {}",
                xi.len(),
                self.dim
            )));
        }
        if xi.iter().all(|&x| x == 0.0) {
            return Err(Error::SupportAtOrigin);
        }
        Ok(())
    }

    /// Support function `h(xi)`.
    pub fn support(&self, xi: &[f64]) -> Result<f64> {
        self.check(xi)?;
        Ok(self.h_unchecked(xi))
    }

    fn h_unchecked(&self, xi: &[f64]) -> f64 {
        let v = DVector::from_column_slice(xi);
        match &self.kind {
            BodyKind::EuclideanBall => v.norm(),
            BodyKind::Ellipsoid { a } => v.dot(&(a * &v)).sqrt(),
            BodyKind::PerturbedBall { eps, b } => {
                let r = v.norm();
                r + eps * v.dot(&(b * &v)) / r
            }
            BodyKind::Custom(c) => (c.support)(xi),
        }
    }

    /// `Dh(xi)`.
    pub fn support_gradient(&self, xi: &[f64]) -> Result<DVector<f64>> {
        self.check(xi)?;
        let v = DVector::from_column_slice(xi);
        Ok(match &self.kind {
            BodyKind::EuclideanBall => &v / v.norm(),
            BodyKind::Ellipsoid { a } => {
                let av = a * &v;
                let h = v.dot(&av).sqrt();
                av / h
            }
            BodyKind::PerturbedBall { eps, b } => {
                let r = v.norm();
                let bv = b * &v;
                let q = v.dot(&bv);
                &v / r + (bv * (2.0 / r) - &v * (q / r.powi(3))) * *eps
            }
            BodyKind::Custom(c) => match &c.gradient {
                Some(g) => g(xi),
                None => central_gradient(&*c.support, xi),
            },
        })
    }

    /// `D^2 h(xi)`.
    pub fn support_hessian(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        self.check(xi)?;
        let n = self.dim;
        let v = DVector::from_column_slice(xi);
        Ok(match &self.kind {
            BodyKind::EuclideanBall => {
                let r = v.norm();
                let u = &v / r;
                (DMatrix::identity(n, n) - &u * u.transpose()) / r
            }
            BodyKind::Ellipsoid { a } => {
                let av = a * &v;
                let h = v.dot(&av).sqrt();
                (a - &av * av.transpose() / (h * h)) / h
            }
            BodyKind::PerturbedBall { eps, b } => {
                let r = v.norm();
                let u = &v / r;
                let bv = b * &v;
                let q = v.dot(&bv);
                let iso = (DMatrix::identity(n, n) - &u * u.transpose()) / r;
                let r3 = r.powi(3);
                let pert = b * (2.0 / r)
                    - (&bv * v.transpose() + &v * bv.transpose()) * (2.0 / r3)
                    - DMatrix::identity(n, n) * (q / r3)
                    + &v * v.transpose() * (3.0 * q / r.powi(5));
                iso + pert * *eps
            }
            BodyKind::Custom(c) => match (&c.hessian, &c.gradient) {
                (Some(hf), _) => hf(xi),
                (None, Some(g)) => central_jacobian(&**g, xi),
                (None, None) => {
                    let s = c.support.clone();
                    central_jacobian(&move |x: &[f64]| central_gradient(&*s, x), xi)
                }
            },
        })
    }

    /// `H(xi) = h(xi)^2 / 2`.
    pub fn h_function(&self, xi: &[f64]) -> Result<f64> {
        self.check(xi)?;
        Ok(match &self.kind {
            BodyKind::EuclideanBall => 0.5 * xi.iter().map(|x| x * x).sum::<f64>(),
            BodyKind::Ellipsoid { a } => {
                let v = DVector::from_column_slice(xi);
                0.5 * v.dot(&(a * &v))
            }
            _ => {
                let h = self.h_unchecked(xi);
                0.5 * h * h
            }
        })
    }

    /// `DH = h Dh`; exact `xi` for the ball and `A xi` for ellipsoids.
    pub fn dh(&self, xi: &[f64]) -> Result<DVector<f64>> {
        self.check(xi)?;
        Ok(match &self.kind {
            BodyKind::EuclideanBall => DVector::from_column_slice(xi),
            BodyKind::Ellipsoid { a } => a * DVector::from_column_slice(xi),
            _ => self.support_gradient(xi)? * self.h_unchecked(xi),
        })
    }

    /// `D^2 H = Dh (x) Dh + h D^2 h`; exact identity for the ball and `A` for
    /// ellipsoids.
    pub fn d2h(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        self.check(xi)?;
        Ok(match &self.kind {
            BodyKind::EuclideanBall => DMatrix::identity(self.dim, self.dim),
            BodyKind::Ellipsoid { a } => a.clone(),
            _ => {
                let g = self.support_gradient(xi)?;
                let hess = self.support_hessian(xi)?;
                &g * g.transpose() + hess * self.h_unchecked(xi)
            }
        })
    }

    /// Points `Dh(nu_k)` on the boundary of the body for quasi-uniform unit
    /// directions `nu_k`; the first direction is always `e_1`.
    pub fn wulff_boundary(&self, n_samples: usize) -> Vec<DVector<f64>> {
        unit_directions(self.dim, n_samples)
            .iter()
            .map(|nu| {
                self.support_gradient(nu.as_slice())
                    .expect("unit directions are nonzero")
            })
            .collect()
    }

    /// Samples `D^2 h` over unit directions: passes iff the tangential
    /// spectrum stays above `tol_pd`, `D^2 h(nu) nu` vanishes and `h > 0`.
    pub fn check_c2_plus(&self, n_directions: usize, tol_pd: f64) -> Result<C2PlusReport> {
        let mut min_eig = f64::INFINITY;
        let mut leak: f64 = 0.0;
        let mut min_h = f64::INFINITY;
        for nu in unit_directions(self.dim, n_directions) {
            let h = self.support(nu.as_slice())?;
            min_h = min_h.min(h);
            let hess = self.support_hessian(nu.as_slice())?;
            leak = leak.max((&hess * &nu).norm());
            if self.dim > 1 {
                let p = orthogonal_complement(&nu);
                let t = p.transpose() * &hess * &p;
                if let Some(&l) = sym_eigenvalues(&t).first() {
                    min_eig = min_eig.min(l);
                }
            }
        }
        let scale = min_eig.abs().max(1.0);
        Ok(C2PlusReport {
            pass: min_h > 0.0 && min_eig >= tol_pd && leak <= 1e-6 * scale,
            min_tangential_eigenvalue: min_eig,
            max_normal_leak: leak,
            min_support: min_h,
        })
    }
}

fn central_gradient(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), xi: &[f64]) -> DVector<f64> {
    let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    let step = 1e-5 * norm;
    let mut x = xi.to_vec();
    DVector::from_iterator(
        xi.len(),
        (0..xi.len()).map(|k| {
            x[k] = xi[k] + step;
            let fp = f(&x);
            x[k] = xi[k] - step;
            let fm = f(&x);
            x[k] = xi[k];
            (fp - fm) / (2.0 * step)
        }),
    )
}

fn central_jacobian(g: &(dyn Fn(&[f64]) -> DVector<f64> + Send + Sync), xi: &[f64]) -> DMatrix<f64> {
    let n = xi.len();
    let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    let step = 1e-5 * norm;
    let mut x = xi.to_vec();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        x[k] = xi[k] + step;
        let gp = g(&x);
        x[k] = xi[k] - step;
        let gm = g(&x);
        x[k] = xi[k];
        m.set_column(k, &((gp - gm) / (2.0 * step)));
    }
    0.5 * (&m + m.transpose())
}

/// Deterministic quasi-uniform unit vectors in `R^dim`, starting with `e_1`.
pub fn unit_directions(dim: usize, n: usize) -> Vec<DVector<f64>> {
    let e1 = || {
        let mut v = DVector::zeros(dim);
        v[0] = 1.0;
        v
    };
    match dim {
        1 => (0..n)
            .map(|k| DVector::from_element(1, if k % 2 == 0 { 1.0 } else { -1.0 }))
            .collect(),
        2 => (0..n)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / n as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect(),
        _ => {
            if n == 1 {
                return vec![e1()];
            }
            // Fibonacci spiral around e_1 in the first three coordinates, then
            // a deterministic sweep through the remaining axes.
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let x = 1.0 - 2.0 * k as f64 / (n - 1) as f64;
                    let r = (1.0 - x * x).max(0.0).sqrt();
                    let th = golden * k as f64;
                    let mut v = DVector::zeros(dim);
                    v[0] = x;
                    if dim == 3 {
                        v[1] = r * th.cos();
                        v[2] = r * th.sin();
                    } else {
                        // spread the transverse part over the remaining axes
                        let m = dim - 1;
                        let mut rest = DVector::zeros(m);
                        for j in 0..m {
                            rest[j] = (th * (j + 1) as f64 + 0.5 * j as f64).cos();
                        }
                        let rn = rest.norm();
                        for j in 0..m {
                            v[j + 1] = r * rest[j] / rn.max(1e-300);
                        }
                    }
                    {
                        let n = v.norm();
                        v / n
                    }
                })
                .collect()
        }
    }
}
