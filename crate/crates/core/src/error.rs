use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnydError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numeric failure at iteration {iteration}: {reason}")]
    Numeric { iteration: usize, reason: String },

    #[error("federated round {round}, node {node}: {source}")]
    Federated {
        round: usize,
        node: usize,
        #[source]
        source: Box<AnydError>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AnydError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AnydError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AnydError::Invalid(msg.into())
    }

    /// True when the failure is numeric (NaN/Inf, divergence) rather than
    /// a usage or data problem.
    pub fn is_numeric(&self) -> bool {
        match self {
            AnydError::NonFinite(_) | AnydError::Numeric { .. } => true,
            AnydError::Federated { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = AnydError> = std::result::Result<T, E>;
