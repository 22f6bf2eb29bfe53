use std::fmt;
use std::io;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SydError>;

/// Errors emitted by the tensor engine, data pipeline, and trainer.
#[derive(Debug)]
pub enum SydError {
    /// An operation received operands of incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An axis argument is out of range for the operand's rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    /// Patch geometry violates a divisibility or bounds constraint.
    Geometry(String),
    /// A hyperparameter is outside its legal range.
    Parameter(String),
    /// A class label exceeds the model's class count.
    Label { label: usize, num_classes: usize },
    /// The optimizer was asked to step a parameter with no gradient.
    MissingGradient { param: String },
    /// A binary file (SYDF/SYDW) is malformed at the given byte offset.
    Format { offset: u64, message: String },
    /// Configuration is invalid or inconsistent.
    Config(String),
    /// Dataset ingestion failed.
    Data(String),
    /// Training aborted on a non-finite loss; carries gradient-norm diagnostics.
    Numeric(String),
    Io(io::Error),
    /// An I/O failure with the path that caused it.
    PathIo { path: PathBuf, source: io::Error },
}

impl fmt::Display for SydError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::InvalidAxis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} out of range for shape {shape:?}")
            }
            Self::Geometry(msg) => write!(f, "patch geometry error: {msg}"),
            Self::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            Self::Label { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Self::MissingGradient { param } => {
                write!(f, "optimizer: parameter '{param}' has no gradient")
            }
            Self::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Data(msg) => write!(f, "data error: {msg}"),
            Self::Numeric(msg) => write!(f, "numeric abort: {msg}"),
            Self::Io(e) => write!(f, "I/O error: {e}"),
            Self::PathIo { path, source } => {
                write!(f, "I/O error on {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for SydError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::PathIo { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<io::Error> for SydError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

impl SydError {
    /// Attach a path to a bare I/O error.
    pub fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Self::Io(source) => Self::PathIo {
                path: path.into(),
                source,
            },
            other => other,
        }
    }
}
