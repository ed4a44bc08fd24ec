use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad magic in {what}: expected {expected:02x?}, found {found:02x?}")]
    BadMagic {
        what: &'static str,
        expected: Vec<u8>,
        found: Vec<u8>,
    },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("encoder fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Malformed { .. } => "malformed",
            Error::Config { .. } => "config",
            Error::Constraint(_) => "constraint",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
