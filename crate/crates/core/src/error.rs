use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image file not found: {0}")]
    MissingImage(PathBuf),

    #[error("manifest schema violation: {0}")]
    SchemaViolation(String),

    #[error("closed class {class:?} of sample {sample_id} is not in the class vocabulary")]
    ClassNotInVocabulary { sample_id: String, class: String },

    #[error("need at least {required} patients to split, got {found}")]
    TooFewPatients { found: usize, required: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("projection head expects input width {expected}, got {found}")]
    HeadWidthMismatch { expected: usize, found: usize },

    #[error("channel fusion needs at least one source")]
    EmptySources,

    #[error("weight archive not found: {0}")]
    ArchiveMissing(PathBuf),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("incompatible tensor shapes: {}", .0.join(", "))]
    ShapeIncompatible(Vec<String>),

    #[error("prefix of length {len} exceeds the budget of {max}")]
    PrefixTooLong { len: usize, max: usize },

    #[error("answer has no tokens")]
    EmptyAnswer,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("split {0} is empty")]
    EmptySplit(&'static str),

    #[error("no closed-question samples to score")]
    NoClosedSamples,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("judge {judge} failed on sample {sample_id}: {message}")]
    JudgeFailure {
        judge: String,
        sample_id: String,
        message: String,
    },

    #[error("unknown case: {0}")]
    UnknownCase(String),

    #[error("unknown sample: {0}")]
    UnknownSample(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingImage(_) => "MissingImage",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::ClassNotInVocabulary { .. } => "ClassNotInVocabulary",
            Error::TooFewPatients { .. } => "TooFewPatients",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::HeadWidthMismatch { .. } => "HeadWidthMismatch",
            Error::EmptySources => "EmptySources",
            Error::ArchiveMissing(_) => "ArchiveMissing",
            Error::CorruptArchive(_) => "CorruptArchive",
            Error::ShapeIncompatible(_) => "ShapeIncompatible",
            Error::PrefixTooLong { .. } => "PrefixTooLong",
            Error::EmptyAnswer => "EmptyAnswer",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptySplit(_) => "EmptySplit",
            Error::NoClosedSamples => "NoClosedSamples",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::JudgeFailure { .. } => "JudgeFailure",
            Error::UnknownCase(_) => "UnknownCase",
            Error::UnknownSample(_) => "UnknownSample",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Image(_) => "Image",
        }
    }
}
