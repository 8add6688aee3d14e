//! Error type shared across the crate.

/// Everything that can go wrong in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that had to agree did not. Carries both so the message is
    /// actually debuggable.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar argument was outside its valid range (negative lambda, zero
    /// tau, stride of zero, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An iterative solver produced a non-finite value.
    #[error("solver diverged at iteration {iteration}: {context}")]
    Divergence { iteration: usize, context: String },

    /// A recognized defense identifier that this crate deliberately does not
    /// implement.
    #[error("defense `{0}` is recognized but out of scope for this implementation")]
    OutOfScope(String),

    /// A forward pass was asked to expose a tap label the model does not have.
    #[error("unknown tap label `{0}`")]
    MissingTap(String),

    /// A config file failed to parse; `line` is 1-based.
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    /// An IDX file started with the wrong magic number.
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    /// An IDX file ended before its header said it would.
    #[error("{path}: truncated IDX payload, expected {expected} bytes, got {got}")]
    IdxTruncated {
        path: String,
        expected: usize,
        got: usize,
    },

    /// Image and label files disagree about how many records they hold.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A binary artifact (checkpoint, image file) was malformed.
    #[error("{path}: {message}")]
    FileFormat { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for the most common construction.
    pub fn dims(context: &str, left: &[usize], right: &[usize]) -> Self {
        Error::DimensionMismatch {
            context: context.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
