//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

/// Failure modes of the recognition pipeline.
///
/// Variants are grouped by the kind of contract they report on: caller
/// mistakes (`InvalidParameter`, `ShapeMismatch`, `InvalidInput`), data that
/// cannot support the requested operation (`InsufficientEdgeEvidence`,
/// `InsufficientMinutiae`, `DegeneratePatch`, `DegenerateLabels`,
/// `InvalidBatch`, `InvalidCorpus`, `UndefinedPrecision`), numerical
/// breakdowns (`DegenerateFit`, `ImplausibleGeometry`, `TrainingDiverged`),
/// and plumbing (`Manifest`, `State`, `Io`, `Format`, `Stage`).
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Array or image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Too few boundary points survived filtering to fit an edge curve.
    #[error("insufficient edge evidence: {0}")]
    InsufficientEdgeEvidence(String),

    /// A least-squares or decomposition problem is singular.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A geometric result is outside the range the pipeline accepts.
    #[error("implausible geometry: {0}")]
    ImplausibleGeometry(String),

    /// Fewer skeleton keypoints were found than the stage requires.
    #[error("insufficient minutiae: found {found}, need at least {required}")]
    InsufficientMinutiae { found: usize, required: usize },

    /// A patch has no intensity variation, so it cannot be described.
    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    /// A training batch violates the sampler's contract.
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    /// A training corpus cannot supply the requested batches.
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    /// Input data violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Optimization produced a non-finite loss or parameter.
    #[error("training diverged at step {step}: {message}")]
    TrainingDiverged { step: usize, message: String },

    /// Ground-truth labels carry no signal (for example, all zeros).
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// Precision has an empty denominator (no predicted positives).
    #[error("precision undefined: {0}")]
    UndefinedPrecision(String),

    /// A dataset manifest is malformed or inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// An object was used in a state that does not support the call.
    #[error("state error: {0}")]
    State(String),

    /// An operating-system I/O failure, with the path that triggered it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file's bytes do not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A pipeline stage failed; wraps the underlying error with the stage
    /// name and the image path being processed.
    #[error("stage '{stage}' failed for {path}: {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an OS error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps any pipeline error with the stage and input that produced it.
    pub fn stage(stage: &str, path: impl Into<PathBuf>, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            path: path.into(),
            source: Box::new(source),
        }
    }

    /// The stage-independent root cause of this error.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
