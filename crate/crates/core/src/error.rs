use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV container: {0}")]
    MalformedContainer(String),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("utterance too short: {frames} frames, at least {required} required")]
    TooShort { frames: usize, required: usize },
    #[error("utterance too long: {seconds:.1} s exceeds the {limit:.1} s limit")]
    TooLong { seconds: f64, limit: f64 },
    #[error("voice activity detection rejected every frame")]
    AllFramesRejected,
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("GMM component {component} degenerated and could not be reseeded")]
    DegenerateComponent { component: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("vector has zero norm after centering")]
    ZeroVector,
    #[error("insufficient speakers: {0}")]
    InsufficientSpeakers(String),
    #[error("EM failed to converge: {0}")]
    NonConvergence(String),
    #[error("i-vector is not length-normalized")]
    NotNormalized,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("utterance {0:?} not found")]
    MissingUtterance(String),
    #[error("speaker label {0:?} is not enrolled in the gallery")]
    UnknownSpeakerLabel(String),
    #[error("clip {id:?} is {seconds:.2} s long, shorter than the requested {required:.2} s")]
    ClipTooShort { id: String, seconds: f64, required: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model container: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
