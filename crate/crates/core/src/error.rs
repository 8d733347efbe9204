use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container, manifest or mask file.
    #[error("format error: {0}")]
    Format(String),

    #[error("record {record}: row {row} sums to {sum} (expected 1 within {tolerance})")]
    NotRowStochastic {
        record: String,
        row: usize,
        sum: f64,
        tolerance: f64,
    },

    #[error("record {record}: entry {index} = {value} lies outside [0, 1]")]
    OutOfRange {
        record: String,
        index: usize,
        value: f32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing blob for {descriptor} at {path}: {source}")]
    MissingBlob {
        descriptor: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("aggregation error: no {kind} records at scale {scale} in the selected range")]
    EmptySelection { kind: String, scale: u16 },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("mIoU undefined: every class has an empty union")]
    UndefinedMean,

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
