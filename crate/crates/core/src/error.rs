use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum MimoError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("node `{node}`: {message}")]
    Graph { node: String, message: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data corruption: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MimoError {
    pub(crate) fn graph(node: impl Into<String>, message: impl Into<String>) -> Self {
        MimoError::Graph {
            node: node.into(),
            message: message.into(),
        }
    }

    /// Wraps a lower-level error with the id of the node that produced it.
    pub(crate) fn at_node(self, node: &str) -> Self {
        match self {
            MimoError::Shape { .. } | MimoError::Config(_) => {
                MimoError::graph(node, self.to_string())
            }
            other => other,
        }
    }
}

pub type Result<T, E = MimoError> = std::result::Result<T, E>;
