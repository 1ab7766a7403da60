use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"RDMP\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("label out of range: label {label} >= class count {classes}")]
    LabelOutOfRange { label: u32, classes: u32 },

    #[error("invalid representation set: {0}")]
    InvalidSet(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("no within-class pairs")]
    NoWithinClassPairs,

    #[error("need >= 2 classes with samples, found {0}")]
    TooFewClasses(usize),

    #[error("dimension too small for packing bound (D = {0})")]
    DimensionTooSmall(usize),

    #[error("all-zero representations")]
    AllZeroRepresentations,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("selection: {0}")]
    Selection(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
