use alloc::string::String;

/// Errors produced by the core kernels, schedules, data protocol and metrics.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    TensorSize {
        shape: alloc::vec::Vec<usize>,
        len: usize,
    },

    #[error("shape mismatch at stage `{stage}`: {reason}")]
    ShapeMismatch { stage: String, reason: String },

    #[error("stages `{previous}` and `{stage}` are incompatible: {reason}")]
    IncompatibleStages {
        previous: String,
        stage: String,
        reason: String,
    },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("iteration {iteration} outside [0, {total})")]
    IterationOutOfRange { iteration: u64, total: u64 },

    #[error("no multiplier for stage `{0}`")]
    MissingMultiplier(String),

    #[error("multiplier given for unknown stage `{0}`")]
    UnknownStage(String),

    #[error("label `{label}` has {count} examples, at least {required} required")]
    TooFewExamples {
        label: String,
        count: usize,
        required: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("division by zero in {0}")]
    ZeroDenominator(&'static str),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("missing sweep records: {0}")]
    MissingRecords(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
