//! Nonconforming h-p spectral element least-squares solver for second-order
//! elliptic boundary-value problems on straight-edged polygons.
//!
//! Corners are resolved by geometrically graded sector layers in log-polar
//! coordinates, the remainder of the domain by a few quadrilaterals. The
//! discrete solution minimizes a weighted sum of squared residuals (PDE,
//! boundary data and inter-element jumps), solved through a Schur complement
//! on the corner constants with a block-diagonal preconditioned CG.

pub mod assembly;
pub mod basis;
pub mod fracnorm;
pub mod geometry;
pub mod harness;
pub mod operator;
pub mod probdef;
pub mod solver;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("syntax error at position {pos} (column {col}): {msg}", col = .pos + 1)]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("function `{name}` expects {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("domain error at point index {index}: {msg}")]
    Domain { index: usize, msg: String },
    #[error("schema violation in `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("edge count mismatch: {edges} edges for {vertices} vertices")]
    EdgeCountMismatch { edges: usize, vertices: usize },
    #[error("polygon is not simple: {0}")]
    NonSimplePolygon(String),
    #[error("operator is not elliptic: minimum eigenvalue {min_eig} at ({x}, {y})")]
    NotElliptic { min_eig: f64, x: f64, y: f64 },
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("solver failure in phase {phase}: {msg}")]
    Solver { phase: String, msg: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
