use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV file: {0}")]
    MalformedWav(String),
    #[error("expected mono audio, found {0} channels")]
    ChannelCount(u16),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    AudioTooShort { samples: usize, window: usize },
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown phone '{0}'")]
    UnknownPhone(String),
    #[error("alignment infeasible: {frames} frames for {states} left-to-right states")]
    AlignmentInfeasible { frames: usize, states: usize },

    #[error("statistics layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("need at least {needed} classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("trial list needs both target and non-target trials: {0}")]
    MissingTrials(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a pipeline stage name to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            staged @ Error::Stage { .. } => staged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
