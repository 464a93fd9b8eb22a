use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("empty density: all samples are zero")]
    EmptyDensity,

    #[error("invalid density: sample ({row}, {col}) = {value}")]
    InvalidDensity { row: usize, col: usize, value: f64 },

    #[error("degenerate grid shape {height}x{width} (need at least 2x2)")]
    DegenerateShape { height: usize, width: usize },

    #[error("grid data length {len} does not match shape {height}x{width}")]
    DataLength { height: usize, width: usize, len: usize },

    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("grid {height}x{width} is smaller than the filter support {support}")]
    GridTooSmall {
        height: usize,
        width: usize,
        support: usize,
    },

    #[error("invalid window: pad {pad} must be >= transition {transition} >= {min_transition}")]
    InvalidWindow {
        pad: usize,
        transition: usize,
        min_transition: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line search failed{}", level.map(|l| format!(" at level {l}")).unwrap_or_default())]
    LineSearchFailed { level: Option<usize> },

    #[error("non-invertible field: {failed} of {total} nodes did not converge")]
    NonInvertible {
        failed: usize,
        total: usize,
        /// Row-major mask of nodes whose inversion did not converge.
        mask: Vec<bool>,
    },

    #[error("folded cells: {count} cells with non-positive area, first at (row {row}, col {col})")]
    FoldedCells { count: usize, row: usize, col: usize },

    #[error("point {x} lies outside the support [{lo}, {hi}]")]
    OutsideSupport { x: f64, lo: f64, hi: f64 },

    #[error("only {inside:.5} of the density mass lies inside the domain (need {required})")]
    MassEscape { inside: f64, required: f64 },

    #[error("negative input sample {value} at index {index}")]
    NegativeInput { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
