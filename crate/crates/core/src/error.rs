use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    DegenerateNorm { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input of length {got} does not match model input length {expected}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("feature is not unit-norm (norm = {norm})")]
    UnnormalizedInput { norm: f64 },

    #[error("label {label} is outside the classifier range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training batch is empty")]
    EmptyBatch,

    #[error("batch has {inputs} inputs but {labels} labels")]
    BatchLengthMismatch { inputs: usize, labels: usize },

    #[error("episodic memory is empty")]
    EmptyMemory,

    #[error("rotation requires a square image, got {height}x{width}")]
    NonSquareImage { height: usize, width: usize },

    #[error("residual memory is empty")]
    EmptyResidualMemory,

    #[error("cannot predict from a zero vector")]
    ZeroVector,

    #[error("no seen classes to predict from")]
    NoSeenClasses,

    #[error("{classes} classes cannot be split evenly into {tasks} tasks")]
    IndivisibleClasses { classes: usize, tasks: usize },

    #[error("requested {requested} glyph classes but only {available} templates exist")]
    TooManyClasses { requested: usize, available: usize },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: file is truncated")]
    TruncatedFile { path: PathBuf },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("accuracy trace is empty")]
    EmptyTrace,

    #[error("no online predictions recorded")]
    EmptyInput,

    #[error("class {label} mean coincides with the global mean")]
    DegenerateClassMean { label: usize },

    #[error("neural-collapse diagnostics need at least two classes with features")]
    TooFewClasses,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid model checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
