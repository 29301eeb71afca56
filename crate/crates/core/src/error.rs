use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("axis too small: axis {axis} has {len} nodes, at least 3 are required")]
    AxisTooSmall { axis: usize, len: usize },

    #[error("outside domain")]
    OutsideDomain,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("support undefined at origin")]
    SupportAtOrigin,

    #[error("invalid convex body: {0}")]
    InvalidBody(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    /// Gradient below the floor at the listed linear node indices.
    #[error("degenerate gradient at {} node(s)", nodes.len())]
    DegenerateGradient { nodes: Vec<usize> },

    #[error("degenerate operator")]
    DegenerateOperator,

    #[error("CFL violation: dt = {dt} exceeds the stable bound {bound}")]
    CflViolation { dt: f64, bound: f64 },

    #[error("non-finite value produced at step {step}")]
    NonFinite { step: usize },

    #[error("insufficient level resolution: {empty} of {total} bins are empty")]
    InsufficientLevelResolution { empty: usize, total: usize },

    #[error("level profile not increasing in s at {} bin(s)", bins.len())]
    NonMonotone { bins: Vec<usize> },

    #[error("sign change in time factor")]
    SignChange,

    #[error("not equipotential-invariant: residual {residual:.3e} exceeds {tol:.3e} at t = {time}")]
    NotInvariant { residual: f64, tol: f64, time: f64 },

    #[error("too few samples: found {found}, need {needed}")]
    TooFewSamples { found: usize, needed: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
