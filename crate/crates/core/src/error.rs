use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("too short: signal has {samples} samples, one frame needs {frame_len}")]
    TooShort { samples: usize, frame_len: usize },
    #[error("invalid energies: non-finite log energy at index {0}")]
    InvalidEnergies(usize),
    #[error("filterbank degenerate: mel points {0} and {1} map to the same FFT bin")]
    FilterbankDegenerate(usize, usize),
    #[error("cannot stratify: {0}")]
    CannotStratify(String),
    #[error("ambiguous merge: duplicate patient id `{0}`")]
    AmbiguousMerge(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("single class: {0}")]
    SingleClass(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("non-identifiable: {0}")]
    NonIdentifiable(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("distance matrix is {0}")]
    InvalidDistanceMatrix(String),
    #[error("perplexity {perplexity} infeasible for {n} points")]
    InfeasiblePerplexity { perplexity: f64, n: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("invalid label {0}: labels must be 0 or 1")]
    InvalidLabel(f64),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("cohort validation failed:\n{}", .0.join("\n"))]
    CohortValidation(Vec<String>),
    #[error("missing tabular field(s): {}", .0.join(", "))]
    MissingFields(Vec<String>),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("diverged: non-finite loss or prediction at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Nn(#[from] tbscreen_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
