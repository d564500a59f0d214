use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed Standard MIDI File content.
    #[error("MIDI format error at byte {offset}: {message}")]
    MidiFormat { offset: usize, message: String },

    /// An input violated a documented precondition (bad pitch, out-of-range id, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric parameter was out of range (frame rate, sample rate, n_mels, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("no beats found: {0}")]
    NoBeats(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    /// A quantity is mathematically undefined for the input (empty denominators).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("sequence too long: {len} exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Wav(_) => ErrorKind::Io,
            Error::Divergence { .. } | Error::Undefined(_) => ErrorKind::Numeric,
            Error::Csv(e) if e.is_io_error() => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
