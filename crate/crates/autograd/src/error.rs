use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },

    #[error("node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },

    #[error("node {node} ({op}) produced non-finite value {value} at flat index {index}")]
    NonFinite { node: usize, op: &'static str, index: usize, value: f64 },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("graph has not been evaluated; run the forward pass before backward")]
    NotEvaluated,

    #[error("output gradient has shape {actual:?}, expected {expected:?}")]
    GradShape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure raised inside an operator before the graph attaches node context.
#[derive(Debug, Clone, PartialEq)]
pub struct OpError(pub String);

impl OpError {
    pub fn new(msg: impl Into<String>) -> Self {
        OpError(msg.into())
    }
}

impl std::fmt::Display for OpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<std::fmt::Error> for OpError {
    fn from(e: std::fmt::Error) -> Self {
        OpError(e.to_string())
    }
}
