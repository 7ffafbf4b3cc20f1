use std::path::PathBuf;

use crate::{ImageId, LandmarkId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {0:e} is at or below the zero-norm threshold")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("feature value {value} at location {location}, channel {channel} is negative")]
    NegativeFeature {
        location: usize,
        channel: usize,
        value: f32,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("index set is empty")]
    EmptyIndex,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"EMB1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("id mismatch at position {position}: {expected} vs {found}")]
    IdMismatch {
        position: usize,
        expected: u64,
        found: u64,
    },
    #[error("row count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest is missing role {0:?}")]
    MissingRole(String),

    #[error("no class center for landmark {0}")]
    MissingCenter(LandmarkId),
    #[error("no margin for landmark {0}")]
    MissingMargin(LandmarkId),
    #[error("class counts are empty")]
    EmptyCounts,
    #[error("landmark {0} has no training samples")]
    EmptyClass(LandmarkId),

    #[error("model {model:?} has no logit for {what}")]
    MissingLogit { model: String, what: String },
    #[error("no distractor score for index image {0}")]
    MissingDistractor(ImageId),
    #[error("index image {0} has no label")]
    MissingLabel(ImageId),
    #[error("query {query_id}: {source}")]
    Query {
        query_id: ImageId,
        #[source]
        source: Box<Error>,
    },

    #[error("prediction for unknown query {0}")]
    UnknownQuery(ImageId),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_query(self, query_id: ImageId) -> Self {
        match self {
            e @ Error::Query { .. } => e,
            e => Error::Query {
                query_id,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the command-line surface: 1 for I/O, 2 for
    /// validation, 3 for dimension/alignment, 4 for a missing distractor entry.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::DimMismatch { .. } | Error::IdMismatch { .. } | Error::CountMismatch { .. } => 3,
            Error::MissingDistractor(_) => 4,
            Error::Query { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
