use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate covariance: |det| = {det:e} is below the inversion floor")]
    DegenerateCovariance { det: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: &'static str },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("unsupported PNG bit depth {0} (only 8-bit is accepted)")]
    UnsupportedBitDepth(u8),

    #[error("unsupported PNG color type {0} (only grayscale or RGB without alpha)")]
    UnsupportedColorType(String),

    #[error("corrupt image: {0}")]
    CorruptImage(String),

    #[error("bad magic {0:?}, expected \"LIG1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated model file: need {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },

    #[error("length overflow while sizing {0}")]
    LengthOverflow(&'static str),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateCovariance { .. } => "degenerate_covariance",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::FileNotFound(_) => "file_not_found",
            Error::UnsupportedBitDepth(_) => "unsupported_bit_depth",
            Error::UnsupportedColorType(_) => "unsupported_color_type",
            Error::CorruptImage(_) => "corrupt_image",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::LengthOverflow(_) => "length_overflow",
            Error::InvalidModel(_) => "invalid_model",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dims(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
