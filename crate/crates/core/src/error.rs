use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("qubit {0} appears more than once")]
    DuplicateQubit(usize),

    #[error("qubit {qubit} out of range for a {n_qubits}-qubit register")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },

    #[error("operator is not orthogonal (max |OᵀO - I| = {deviation:.3e})")]
    NonOrthogonalOperator { deviation: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("state is not normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("expected a {expected} image, got {found} values")]
    WrongShape { expected: &'static str, found: usize },

    #[error("pixel value {0} is not a finite intensity in range")]
    InvalidPixel(f64),

    #[error("vector norm {norm:.3e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("tensor power copy count {0} is not in 1..=3")]
    BadCopyCount(usize),

    #[error("constant term must be positive, got {0}")]
    BadConstantTerm(f64),

    #[error("polar factor is not unique (smallest singular value {sigma_min:.3e})")]
    DegenerateProjection { sigma_min: f64 },

    #[error("SVD derivative ill-conditioned (singular value pair sum {pair_sum:.3e})")]
    IllConditionedJacobian { pair_sum: f64 },

    #[error("SVD failed to converge")]
    SvdFailed,

    #[error("label {0} is not a valid class id")]
    BadLabel(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("forward cache does not match the model: {0}")]
    CacheMismatch(String),

    #[error("learning-rate grid is empty")]
    EmptyGrid,

    #[error("exact density-matrix evaluation is limited to 8 qubits, model has {n_qubits}")]
    ExactModeTooLarge { n_qubits: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("orthogonality lost after update (max |QᵀQ - I| = {deviation:.3e})")]
    OrthogonalityLost { deviation: f64 },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: file truncated")]
    TruncatedFile { path: PathBuf },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {message}")]
    CacheFormat { path: PathBuf, message: String },

    #[error("matrix is singular")]
    SingularInput,

    #[error("iteration did not converge after {0} steps")]
    NoConvergence(usize),

    #[error("oracle constructions disagree by {deviation:.3e}")]
    OracleSelfDisagreement { deviation: f64 },

    #[error("function is not finite near the evaluation point")]
    NonFiniteFunction,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
