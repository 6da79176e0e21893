use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vector norm {0:e} is below 1e-12, cannot normalize")]
    ZeroVector(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("loss primitive `{0}` is not registered")]
    UnregisteredPrimitive(String),
    #[error("loss term `{0}` needs context that was not supplied")]
    MissingContext(&'static str),
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("image is not infrared")]
    NotInfrared,
    #[error("image is not visible")]
    NotVisible,
    #[error("clustering produced no clusters")]
    NoClusters,
    #[error("camera {0} yielded no clusters")]
    CameraTooSmall(usize),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("label {0} is not in the bank's label space")]
    UnknownLabel(usize),
    #[error("label spaces differ: {0}")]
    LabelSpaceMismatch(String),
    #[error("feature sets have different sizes: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("batch has no anchor with both a positive and a negative")]
    DegenerateBatch,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),
    #[error("modality {0} produced no clusters")]
    NoClustersInModality(&'static str),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("bad container header: {0}")]
    BadHeader(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Whether the error comes from malformed inputs (files, configs, datasets)
    /// as opposed to a numeric failure inside the pipeline.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::EmptySplit(_)
                | Error::BadMagic(_)
                | Error::BadHeader(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::LengthMismatch { .. }
        )
    }
}
