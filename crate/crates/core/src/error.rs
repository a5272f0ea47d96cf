use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numcore::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite activation in the encoder.
    #[error("numerical error: non-finite activation at encoder layer {layer}")]
    NonFinite { layer: usize },

    /// Training diverged.
    #[error("numerical error in phase `{phase}` epoch {epoch}: {detail}")]
    Diverged { phase: String, epoch: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Diverged { .. }
                | Error::Num(numcore::Error::Numerical(_) | numcore::Error::Domain(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
