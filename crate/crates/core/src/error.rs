use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{what} has zero energy; SNR is undefined")]
    ZeroEnergy { what: &'static str },
    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: u32, right: u32 },
    #[error("clip too short: need {needed} samples, have {available} (loop-pad or reject the source)")]
    ClipTooShort { needed: usize, available: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest {path:?} is invalid:\n{}", errors.join("\n"))]
    Manifest { path: PathBuf, errors: Vec<String> },
    #[error("speaker {speaker}: {reason}")]
    InsufficientMaterial { speaker: String, reason: String },
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible evaluation protocols: {0}")]
    ProtocolMismatch(String),
    #[error("unknown audio id {0}")]
    UnknownAudio(String),
    #[error("WAV error on {path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
