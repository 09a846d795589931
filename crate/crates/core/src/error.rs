use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, network construction, data handling and
/// the training pipeline.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    /// `detail` names the offending dimension.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// Train-mode batch normalization needs at least two elements per channel.
    DegenerateBatch {
        elements_per_channel: usize,
    },
    /// A class label fell outside `[0, classes)`.
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    /// `backward` called on a tensor that is not a scalar.
    NonScalarLoss {
        elements: usize,
    },
    /// `backward` called on a tensor with no recorded tape, or on a tape
    /// that has already been replayed.
    NoTape,
    /// A gradient or loss value became NaN/Inf.
    NonFinite {
        context: String,
    },
    /// A network spec failed validation.
    InvalidSpec(String),
    /// A configuration value failed validation.
    InvalidConfig(String),
    /// Shot noise needs `x_max > x_min`.
    DegenerateRange,
    /// Statistics or training requested over an empty sample set.
    EmptyInput(&'static str),
    /// Pruning sparsity must satisfy `0 <= s < 1`.
    InvalidSparsity(f64),
    /// A prune mask does not match the network it is applied to.
    MaskMismatch(String),
    /// A dataset or checkpoint file carries the wrong magic bytes.
    FormatError {
        expected: String,
        found: String,
    },
    /// A dataset or checkpoint file declares an unsupported version.
    UnsupportedVersion {
        expected: u16,
        found: u16,
    },
    /// A checkpoint weight blob is truncated or its index is inconsistent.
    CorruptIndex(String),
    /// A tensor named in the manifest is absent from the weight blob, or a
    /// required tensor is missing from the manifest.
    MissingTensor {
        name: String,
    },
    /// Record-level splitting needs at least three records.
    TooFewRecords {
        found: usize,
    },
    /// A hyperparameter search was invoked with an empty grid.
    EmptyGrid,
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            Error::DegenerateBatch {
                elements_per_channel,
            } => write!(
                f,
                "train-mode batchnorm needs >= 2 elements per channel, got {elements_per_channel}"
            ),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::NonScalarLoss { elements } => {
                write!(f, "backward requires a scalar loss, got {elements} elements")
            }
            Error::NoTape => write!(f, "no tape recorded for this tensor (or already replayed)"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidSpec(msg) => write!(f, "invalid network spec: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::DegenerateRange => {
                write!(f, "degenerate data range: x_min == x_max")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::InvalidSparsity(s) => {
                write!(f, "sparsity must satisfy 0 <= s < 1, got {s}")
            }
            Error::MaskMismatch(msg) => write!(f, "prune mask mismatch: {msg}"),
            Error::FormatError { expected, found } => {
                write!(f, "format error: expected magic {expected:?}, found {found:?}")
            }
            Error::UnsupportedVersion { expected, found } => {
                write!(f, "unsupported version {found}, expected {expected}")
            }
            Error::CorruptIndex(msg) => write!(f, "corrupt weight index: {msg}"),
            Error::MissingTensor { name } => write!(f, "missing tensor {name:?}"),
            Error::TooFewRecords { found } => {
                write!(f, "need at least 3 records to split, got {found}")
            }
            Error::EmptyGrid => write!(f, "search grid is empty"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
