use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cycle in ISA relation: {0}")]
    Cycle(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer}: {msg}")]
    Spec { layer: usize, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("unsupported image format: {0}")]
    ImageFormat(String),

    #[error("bad magic bytes {0:?}, expected \"HDLC\"")]
    Magic([u8; 4]),

    #[error("unsupported container version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("payload length {found} bytes, expected {expected}")]
    PayloadLength { found: usize, expected: usize },

    #[error("container metadata: {0}")]
    Metadata(String),

    #[error("no leaf model for RID {0}")]
    MissingLeaf(u32),

    #[error("unknown GID {0}")]
    UnknownGid(u32),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
