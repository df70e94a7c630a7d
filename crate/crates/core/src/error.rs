use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{field} field value {value:#x} exceeds maximum {max:#x}")]
    FieldRange { field: &'static str, value: u32, max: u32 },

    #[error("layer is empty")]
    EmptyLayer,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer `{name}`: {source}")]
    InLayer {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize },

    #[error("unknown dtype tag {tag} at byte offset {offset}")]
    UnknownDtype { tag: u8, offset: usize },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("invalid tensor name at byte offset {offset}")]
    BadName { offset: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_layer(self, name: &str) -> Error {
        Error::InLayer { name: name.to_string(), source: Box::new(self) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    /// True for errors originating in file contents or the filesystem rather
    /// than in caller-supplied arguments.
    pub fn is_format_or_io(&self) -> bool {
        match self {
            Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::UnknownDtype { .. }
            | Error::TrailingBytes { .. }
            | Error::DuplicateName(_)
            | Error::BadName { .. }
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::InLayer { source, .. } => source.is_format_or_io(),
            _ => false,
        }
    }
}
