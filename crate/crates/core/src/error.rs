use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("unsupported container format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),

    #[error("empty entry name")]
    EmptyName,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("inconsistent entry `{name}`: {detail}")]
    InconsistentEntry { name: String, detail: String },

    #[error("overlapping entries `{first}` and `{second}`")]
    OverlappingEntries { first: String, second: String },

    #[error("truncated blob: manifest needs {expected} bytes, blob has {actual}")]
    TruncatedBlob { expected: u64, actual: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid covariance for `{layer}`: {detail}")]
    InvalidCovariance { layer: String, detail: String },

    #[error("SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("rank {rank} out of range 0..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no tolerance given for group `{0}`")]
    MissingGroupTolerance(String),

    #[error("no tensor for layer `{0}`")]
    MissingTensor(String),

    #[error("no covariance for layer `{0}`")]
    MissingCovariance(String),

    #[error("no sensitivity weight for layer `{0}`")]
    MissingWeight(String),

    #[error("instance exceeds desk-scale limits: {0}")]
    InstanceTooLarge(String),

    #[error("budget {budget} outside the feasible band [{low}, {high}]")]
    BudgetOutOfBand { budget: f64, low: f64, high: f64 },

    #[error("non-finite iterate in ALS at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::NonFiniteIterate { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
