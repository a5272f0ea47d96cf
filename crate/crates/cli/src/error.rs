use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Config does not match the schema; `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] dum_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("refusing to overwrite {}; pass --force", .0.display())]
    Exists(PathBuf),
}

impl CliError {
    /// Process exit code: 2 for bad configs or usage, 3 for numerical
    /// failures, 4 for unwritable outputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } | CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(dum_core::Error::Config(_)) => 2,
            CliError::Io { .. } | CliError::Exists(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}
