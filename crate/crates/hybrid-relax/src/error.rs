//! Error type shared across the crate.

use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum HybridError {
    /// Malformed system definition (bad file, unknown field kind, dimension
    /// mismatch in the configuration tree).
    #[error("configuration error: {0}")]
    Config(String),

    /// A structurally invalid system was handed to an operation that requires
    /// a valid one.
    #[error("system validation failed:\n{0}")]
    InvalidSystem(ValidationReport),

    /// Transition geometry could not be built for an edge.
    #[error("edge {edge}: {message}")]
    Geometry { edge: usize, message: String },

    /// The edge's transition matrix is rank deficient; the caller must use
    /// the augmented simulation path.
    #[error("edge {edge}: transition matrix is rank deficient; use the augmented path")]
    RankDeficient { edge: usize },

    /// A sliding field was requested outside the sliding region.
    #[error("not a sliding configuration (a1 = {a1}, a2 = {a2})")]
    NotSliding { a1: f64, a2: f64 },

    /// The queried state is outside every region of the mode's extended
    /// domain family.
    #[error("state outside the extended domain of mode {mode} at t = {t}")]
    OutsideDomain { mode: usize, t: f64 },

    /// A guard contact where the Filippov solution concept does not apply
    /// (escaping or degenerate tangency).
    #[error(
        "Filippov solution undefined at t = {t}, mode {mode}, x = {x:?} (a1 = {a1}, a2 = {a2})"
    )]
    FilippovUndefined {
        t: f64,
        mode: usize,
        x: Vec<f64>,
        a1: f64,
        a2: f64,
    },

    /// Field evaluation produced NaN or infinity.
    #[error("non-finite field value at t = {t} ({context})")]
    NonFinite { t: f64, context: String },

    /// Defensive bound on the number of discrete events.
    #[error("event budget of {budget} exhausted at t = {t}")]
    EventBudget { t: f64, budget: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Sensitivity analysis requires a nominal trajectory without reset
    /// events (a single extended chart).
    #[error("nominal trajectory has a reset event at t = {t}; sensitivity is single-chart only")]
    UnsupportedChart { t: f64 },

    #[error("trajectories cover different horizons ({0} vs {1})")]
    HorizonMismatch(f64, f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Log-log fits require at least 3 grid points with errors above the
    /// floating-point noise floor.
    #[error("sweep fit needs at least 3 usable grid points, found {0}")]
    InsufficientGrid(usize),

    /// A reset image landed outside the target mode's relaxed domain, which
    /// indicates inconsistent edge data.
    #[error("reset along edge {edge} left the target domain at t = {t}")]
    ResetConsistency { t: f64, edge: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
