use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {need}")]
    SignalTooShort { len: usize, need: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("band resolution too fine for FFT grid: band {band} centred at {center_hz:.1} Hz covers no FFT bin")]
    DegenerateBand { band: usize, center_hz: f64 },

    #[error("silent RIR")]
    SilentRir,

    #[error("insufficient decay range: EDC bottoms out at {reached_db:.1} dB, fit needs {needed_db:.1} dB")]
    InsufficientDecay { reached_db: f64, needed_db: f64 },

    #[error("unsupported sample rate {got} Hz, expected {expected} Hz (pass --resample to convert)")]
    SampleRate { got: u32, expected: u32 },

    #[error("unsupported audio format: {0}")]
    AudioFormat(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("cannot form real-room test split: {real} real rooms available, need at least {needed}")]
    TestSplit { real: usize, needed: usize },

    #[error("undefined SC (zero denominator)")]
    UndefinedSc,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Coarse classification used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::SignalTooShort { .. }
            | Error::SilentRir
            | Error::InsufficientDecay { .. }
            | Error::SampleRate { .. }
            | Error::AudioFormat(_)
            | Error::EmptyInput(_)
            | Error::TestSplit { .. }
            | Error::UndefinedSc
            | Error::Data(_)
            | Error::Io(_)
            | Error::Wav(_)
            | Error::Json(_) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
