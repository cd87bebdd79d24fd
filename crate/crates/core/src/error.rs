use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("sequence too short: length {len} is less than window width {width}")]
    SequenceTooShort { len: usize, width: usize },
    #[error("example {index}: sequence of length {len} is shorter than the model minimum {min}")]
    ExampleTooShort { index: usize, len: usize, min: usize },
    #[error("window width {got} does not match the extended layer width {expected}")]
    WindowWidth { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has no examples")]
    EmptyClass(usize),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("wav: {0}")]
    Wav(#[from] WavError),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("missing RIFF/WAVE magic")]
    BadMagic,
    #[error("unsupported format code {0} (only PCM = 1)")]
    NotPcm(u16),
    #[error("unsupported sample layout: {channels} channels, {bits} bits")]
    Layout { channels: u16, bits: u16 },
    #[error("missing fmt chunk")]
    MissingFmt,
    #[error("truncated data chunk: header says {declared} bytes, {available} present")]
    Truncated { declared: usize, available: usize },
    #[error("missing data chunk")]
    MissingData,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::WindowWidth { .. } => ErrorKind::Config,
            Error::Shape { .. } | Error::NonFinite(_) => ErrorKind::Numeric,
            Error::SequenceTooShort { .. }
            | Error::ExampleTooShort { .. }
            | Error::LabelOutOfRange { .. }
            | Error::EmptyClass(_)
            | Error::EmptyDataset(_)
            | Error::Data(_)
            | Error::Wav(_)
            | Error::ModelFormat(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
