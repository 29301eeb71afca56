//! Invariant equipotential surfaces of heat and quasi-linear parabolic flows.
//!
//! The crate evolves `u_t = Q u` on structured grids, reconstructs the level
//! profile `u(x, t) = eta(phi(x), t)` from a time series, and sorts the data
//! into one of three regimes:
//!
//! * isoparametric levels (`G phi = f(phi)`, `Q phi = g(phi)`),
//! * separated eigen decay `u = a(t) phi_lambda + mu`,
//! * linear drift `u = gamma (t - tau) + w`.
//!
//! Anisotropic support-function geometry (Weingarten operator, mean curvature,
//! Wulff shapes, geodesics of `DH(D phi)`) lives in [`convex`] and
//! [`isoparametric`].
//!
//! Per-node kernels run on rayon when the `parallel` feature is enabled (the
//! default); see [`par`] for switching to sequential execution at runtime.

// `!(x > y)` is used on purpose so that NaN takes the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod convex;
pub mod error;
pub mod evolve;
pub mod grid;
pub mod invariance;
pub mod io;
pub mod isoparametric;
pub mod numeric;
pub mod operators;
pub mod par;

pub use classify::{classify, Branch, ClassificationReport, ClassifyConfig};
pub use convex::{BodyKind, BodySpec, ConvexBody};
pub use error::{Error, Result};
pub use evolve::{run, step, BoundaryCondition, EvolveConfig, TimeStep};
pub use grid::{DomainMask, Grid, MatrixField, NodeKind, ScalarField, TimeSeriesField, VectorField};
pub use invariance::{build_eta, eta_partials, invariance_residual, EtaPartials, EtaTable};
pub use operators::{OperatorKind, OperatorSpec, QuasiLinearOperator};
