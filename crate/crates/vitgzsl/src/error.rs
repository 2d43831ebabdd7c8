//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("attribute kind mismatch: {0}")]
    KindMismatch(String),

    #[error("layer {layer} out of range 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("image with {0} not divisible into whole patches")]
    IndivisibleImage(String),

    #[error("class {0} appears in a training batch but is not a seen class")]
    UnseenClassInBatch(usize),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class {0} has no feature vectors")]
    MissingClass(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("model used before training: {0}")]
    UntrainedModel(&'static str),

    #[error("required module missing: {0}")]
    MissingModule(&'static str),

    #[error("taint violation: {0}")]
    TaintViolation(String),

    #[error("invalid dataset spec: {0}")]
    SpecInvalid(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("tensor {0} missing from weight file")]
    MissingTensor(String),

    #[error("dimension mismatch for {name}: expected {expected:?}, found {found:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt length: {0}")]
    CorruptLength(String),

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("unknown config key at line {line}: {key}")]
    UnknownKey { line: usize, key: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteGradient(_))
    }
}
