use thiserror::Error;

/// Errors produced by the compression toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot merge accumulators: {0}")]
    MergeKey(String),
    #[error("accumulator for {0} has no samples")]
    EmptyAccumulator(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("whitening root is singular: {0}")]
    WhiteningSingular(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("size mismatch for tensor {name}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u64),
    #[error("missing statistics: {}", .0.join(", "))]
    MissingStatistics(Vec<String>),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
