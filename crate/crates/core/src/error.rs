use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coin index {value} out of range for dimension {dim}")]
    InvalidCoinIndex { value: i32, dim: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("matrix is not unitary (residual {residual:.3e})")]
    NotUnitary { residual: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("perturbation size {0} outside [0, 2)")]
    InvalidDelta(f64),

    #[error("invalid phase distribution: {0}")]
    InvalidDistribution(String),

    #[error("phase field has no value at site {site:?}, coin {coin}")]
    FieldCoverage { site: Vec<i32>, coin: i32 },

    #[error("permutation does not satisfy the localization condition")]
    NonLocalizing,

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("nonzero amplitude leaves the region at site {site:?}, coin {coin}")]
    BoundaryLeak { site: Vec<i32>, coin: i32 },

    #[error("subspace not invariant: state at {site:?}, coin {coin} maps outside the basis")]
    NotInvariant { site: Vec<i32>, coin: i32 },

    #[error("matrix dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("arc of length {length} too long (limit {limit})")]
    ArcTooLong { length: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("linear solve failed: {0}")]
    SolverFailure(String),

    #[error("{failed} of {total} realizations failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("band flatness {flatness:.3e} falls between the flat and dispersive thresholds")]
    AmbiguousFlatness { flatness: f64 },

    #[error("light-cone violation: {0}")]
    LightCone(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
