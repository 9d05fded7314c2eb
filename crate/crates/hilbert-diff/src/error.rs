//! Crate-wide error type.

/// Errors reported by field, operator, training and IO routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible; `op` names the offending primitive.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An interpolation or search source set was empty.
    #[error("empty source set")]
    EmptySource,

    /// The operation requires a field sampled on a full regular grid.
    #[error("field is not on a regular grid")]
    NotOnGrid,

    /// Exact deconvolution hit a frequency where the operator symbol vanishes.
    #[error("inverse ill-conditioned at frequency {freq:?} (|symbol| = {magnitude:.3e})")]
    IllConditioned { freq: Vec<usize>, magnitude: f64 },

    /// An argument was outside its documented range.
    #[error("{0}")]
    InvalidArgument(String),

    /// The training loss became non-finite.
    #[error("training diverged at step {0}: loss is not finite")]
    Diverged(usize),

    /// Configuration file or key problem.
    #[error("config error: {0}")]
    Config(String),

    /// A binary file did not match its documented layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
