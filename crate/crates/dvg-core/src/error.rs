use thiserror::Error;

/// Failure modes of the reverse pass.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward was already called on this tape")]
    Consumed,
    #[error("loss value is not finite: {0}")]
    NonFiniteLoss(f64),
}

/// Failure modes of a training step or a training run.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss term `{term}` is not finite ({value}); aborting the step")]
    NonFiniteTerm { term: &'static str, value: f64 },
    #[error("gradient for parameter `{0}` contains non-finite values")]
    NonFiniteGrad(String),
    #[error("parameter `{0}` became non-finite after the update")]
    NonFiniteParam(String),
    #[error("optimizer holds {expected} parameter slots, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("classifier gate not met: top-1 {got:.4} < required {required:.4}")]
    GateNotMet { got: f64, required: f64 },
    #[error("training requires a non-empty dataset split")]
    EmptySplit,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Pass a loss term through only if it is finite.
pub(crate) fn require_finite(term: &'static str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteTerm { term, value })
    }
}

/// Failure modes of dataset construction, serialization and loading.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: [u8; 4] },
    #[error("unsupported format version {got} in {path} (expected {expected})")]
    BadVersion {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("manifest error in {path}: {detail}")]
    Manifest { path: String, detail: String },
}

/// Failure modes of the evaluation metrics.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric input `{0}` is empty")]
    EmptyInput(&'static str),
    #[error("feature sets have mismatched dimensions: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least {needed} samples to estimate statistics, got {got}")]
    TooFewSamples { got: usize, needed: usize },
    #[error("need at least {needed} impostor scores for far={far}, got {got}")]
    InsufficientImpostors { needed: usize, got: usize, far: f64 },
    #[error("probe identity {0} absent from the gallery")]
    ProbeIdentityMissing(u32),
    #[error("matrix square root failed to converge")]
    EigenNoConvergence,
    #[error("metric input contains non-finite values")]
    NonFinite,
}
