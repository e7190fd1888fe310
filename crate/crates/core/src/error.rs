use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("ragged row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("unparseable value at row {row}, column {col}: {value:?}")]
    ParseValue {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("embedding dimension is zero")]
    ZeroDimension,

    #[error("input contains no rows")]
    NoRows,

    #[error("payload holds {found} bytes but the declared shape needs {expected}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("row {0} has zero L2 norm")]
    ZeroNormRow(usize),

    #[error("duplicate sample id {0:?}")]
    DuplicateIds(String),

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("no sample ids shared by all inputs")]
    EmptyIntersection,

    #[error("requested {requested} samples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("label {label} at position {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("need at least {required} samples, found {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("embedding set {0:?} is not L2-normalized")]
    NotNormalized(String),

    #[error("no pair of samples shares a class")]
    NoPositivePairs,

    #[error("labels do not match the samples: {0}")]
    LabelMismatch(String),

    #[error("embedding set {0:?} carries no labels")]
    MissingLabels(String),

    #[error("inputs are not aligned: {0}")]
    NotAligned(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("k = {k} is too large for {available} candidates")]
    KTooLarge { k: usize, available: usize },

    #[error("k must be positive")]
    ZeroK,

    #[error("graphs use different k ({0} vs {1})")]
    MismatchedK(usize, usize),

    #[error("graphs cover different node sets")]
    MismatchedNodes,

    #[error("cluster count {clusters} differs from class count {classes}")]
    KClassMismatch { clusters: usize, classes: usize },

    #[error("mini-batch size {batch} is smaller than k = {k}")]
    BatchTooSmall { batch: usize, k: usize },

    #[error("class {0} has no training samples")]
    DegenerateLabels(usize),

    #[error("dimension mismatch: model expects {expected}, input has {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("prediction sets are misaligned: {0}")]
    MisalignedPredictions(String),

    #[error("need at least {required} inputs, found {found}")]
    TooFewInputs { required: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("cannot serialize non-finite value in {0}")]
    NonFiniteReport(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for a failure of this kind: 1 for configuration
    /// and parameter errors, 3 for unreadable, malformed or unalignable
    /// inputs, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) | Error::InvalidParameter(_) => 1,
            Error::Io { .. }
            | Error::MalformedHeader { .. }
            | Error::RaggedRow { .. }
            | Error::ParseValue { .. }
            | Error::NonFiniteValue { .. }
            | Error::SizeMismatch { .. }
            | Error::EmptyIntersection
            | Error::DuplicateIds(_) => 3,
            _ => 2,
        }
    }
}
