use std::fmt;

/// One itemized problem found while loading an on-disk dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadError {
    /// Identifier of the offending record (`image:12`, `annotation:40`, ...).
    pub record: String,
    pub message: String,
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("non-finite coordinate {0}")]
    NonFiniteCoordinate(f64),

    #[error("bin {bin} out of range for {num_bins} bins")]
    BinOutOfRange { bin: usize, num_bins: usize },

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("target token {token} is outside the {task} vocabulary")]
    TargetOutsideFilter { token: u32, task: &'static str },

    #[error("sequence of length {len} exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset has {} invalid record(s); first: {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Dataset(Vec<LoadError>),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable category, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Vocab(_) => "vocab",
            Error::NonFiniteCoordinate(_) | Error::BinOutOfRange { .. } => "quantization",
            Error::Annotation(_) => "annotation",
            Error::Config(_) => "config",
            Error::TargetOutsideFilter { .. } => "target",
            Error::SequenceTooLong { .. } => "sequence_length",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
