use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: malformed manifest record: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("unknown label {0:?} (expected \"infected\" or \"uninfected\")")]
    UnknownLabel(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration has {} error(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),
    #[error("need at least {needed} distinct subjects, found {found}")]
    InsufficientSubjects { needed: usize, found: usize },
    #[error("support set of {requested} requested but only {subjects} subjects available (strict mode)")]
    SupportTooLarge { requested: usize, subjects: usize },
    #[error("unknown augmentation op {0:?}")]
    UnknownAugmentation(String),
    #[error("crop {}x{} larger than image {height}x{width}", crop.0, crop.1)]
    CropTooLarge { crop: (usize, usize), height: usize, width: usize },
    #[error("no decodable images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocabulary { token: usize, vocab: usize },
    #[error("prompt template is missing placeholder {0}")]
    Template(&'static str),
    #[error("caption cache miss in replay mode for key {key}")]
    ReplayMiss { key: String },
    #[error("caption transport failed: {0}")]
    Transport(String),
    #[error("batch or dataset contains a single label; triplets need both")]
    SingleLabel,
    #[error("k={k} exceeds support size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated or corrupt file: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("subject leakage: {0}")]
    Leakage(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix is all zeros")]
    AllZeroConfusion,
    #[error("need at least 3 points to project, got {0}")]
    TooFewPoints(usize),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("invalid attention stack: {0}")]
    InvalidAttention(String),
    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("output root {0} is locked by another run")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
