use effecg::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("gradient check failed for: {0}")]
    Gradcheck(String),
}

impl CliError {
    /// 0 success, 1 usage, 2 data error, 3 divergence, 4 gradcheck failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(_) => 2,
            CliError::Gradcheck(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
