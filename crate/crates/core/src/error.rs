use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("softmax row {row} has every entry masked")]
    FullyMaskedRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("click at t={click} is later than the request at t={request}")]
    FutureEvent { request: i64, click: i64 },

    #[error("example is missing feature field `{0}`")]
    MissingField(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Shape,
        expected: Shape,
    },

    #[error("AUC is undefined: labels contain a single class")]
    SingleClass,

    #[error("unknown model kind `{0}`")]
    UnknownKind(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
