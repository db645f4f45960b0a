use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or inputs; nothing has been written.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<trajkd::Error> for CliError {
    fn from(e: trajkd::Error) -> Self {
        use trajkd::Error as E;
        match e {
            E::Config(_)
            | E::Modality(_)
            | E::Shape(_)
            | E::InvalidInput(_)
            | E::InvalidMask { .. }
            | E::Json { .. }
            | E::Checkpoint(_) => CliError::Usage(e.to_string()),
            E::Diverged { .. } | E::NoValidFrames { .. } | E::Io { .. } | E::Image { .. } => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}
