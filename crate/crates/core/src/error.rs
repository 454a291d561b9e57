use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<Error> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("event times not strictly increasing at event {index} (t = {t})")]
    NonMonotoneTime { index: usize, t: f64 },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("dimension {dim} is degenerate (observed std {std:e})")]
    DegenerateDimension { dim: usize, std: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least {needed} events, found {found}")]
    TooFewEvents { needed: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("backward requires a scalar root, node has {len} entries")]
    NonScalarRoot { len: usize },

    #[error("every entry is masked")]
    FullyMasked,

    #[error("non-finite gradient in parameter `{param}`")]
    NanGradient { param: String },

    #[error("integration diverged at t = {t}")]
    IntegrationDiverged { t: f64 },

    #[error("diffusion step {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },

    #[error("non-finite loss on sequence {sequence}")]
    NanLoss { sequence: usize },

    #[error("thinning bound violated {violations} times in {proposed} proposals")]
    BoundViolation { violations: usize, proposed: usize },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Strips line-number context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLine { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::InvalidArgument(_) | Error::Config { .. } => ErrorClass::Usage,
            Error::NonScalarRoot { .. }
            | Error::NanGradient { .. }
            | Error::IntegrationDiverged { .. }
            | Error::NanLoss { .. }
            | Error::BoundViolation { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
