use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected \"AVAF\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container while reading {0}")]
    Truncated(String),

    #[error("unknown dtype code {code} for entry {name}")]
    UnknownDtype { name: String, code: u8 },

    #[error("duplicate entry name {0}")]
    DuplicateName(String),

    #[error("entry {name}: payload is {actual} bytes, dims imply {expected}")]
    SizeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("entry {0}: dims must be non-empty with every extent >= 1")]
    BadDims(String),

    #[error("invalid utf-8 in {0}")]
    Utf8(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("container kind is {found:?}, expected {expected:?}")]
    WrongKind { expected: String, found: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint config digest {found} does not match run config digest {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("stale cache: computed with parameter version {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("metric undefined: {0}")]
    Undefined(String),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
