use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: byte offset {offset}: {message}")]
    Data {
        file: String,
        offset: u64,
        message: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Failure kinds when decoding a `.pqdk` checkpoint.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"PQDK\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("truncated checkpoint: need {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/parse, 3 I/O, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Parse { .. } => 2,
            Error::Io { .. } | Error::Data { .. } | Error::Checkpoint(_) => 3,
            Error::Invariant(_) => 4,
        }
    }
}
