use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: usize, reason: &'static str },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("matrix is not traceless (|trace| = {trace:.3e})")]
    NotTraceless { trace: f64 },

    #[error("matrix is not unitary (deviation {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("state is not normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error(
        "{operation} did not converge for a {dim}x{dim} matrix with Frobenius norm {norm:.3e}"
    )]
    NoConvergence {
        operation: &'static str,
        dim: usize,
        norm: f64,
    },

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("invalid sample schedule: {0}")]
    InvalidSchedule(String),

    #[error("measurement map is not informationally complete (s_min = {s_min:.3e}, s_max = {s_max:.3e})")]
    NotInformationallyComplete { s_min: f64, s_max: f64 },

    #[error("system is not fully controllable (Lie algebra dimension {found} < {expected})")]
    NotControllable { found: usize, expected: usize },

    #[error("Haar time estimation failed after {doublings} doublings (best rate {best_rate:.3})")]
    EstimationFailed { doublings: usize, best_rate: f64 },

    #[error("probe field failed to give an invertible map after {attempts} draws")]
    ProbeFailure { attempts: usize },

    #[error("gradient source failed at iteration {iteration}: {source}")]
    Optimizer {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension { .. } => "invalid-dimension",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NotHermitian { .. } => "not-hermitian",
            Error::NotTraceless { .. } => "not-traceless",
            Error::NotUnitary { .. } => "not-unitary",
            Error::NotNormalized { .. } => "not-normalized",
            Error::InvalidDensityMatrix(_) => "invalid-density-matrix",
            Error::NoConvergence { .. } => "numerical",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::InvalidSchedule(_) => "invalid-schedule",
            Error::NotInformationallyComplete { .. } => "not-informationally-complete",
            Error::NotControllable { .. } => "not-controllable",
            Error::EstimationFailed { .. } => "estimation-failed",
            Error::ProbeFailure { .. } => "probe-failure",
            Error::Optimizer { .. } => "optimizer",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::UnknownPreset(_) => "unknown-preset",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
