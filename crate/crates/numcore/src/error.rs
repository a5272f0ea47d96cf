use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("cannot broadcast shapes {lhs:?} and {rhs:?}")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// `backward` was called twice on the same recorded graph.
    #[error("graph already consumed by a previous backward pass; re-run the forward pass")]
    GraphConsumed,
}

pub type Result<T> = std::result::Result<T, Error>;
