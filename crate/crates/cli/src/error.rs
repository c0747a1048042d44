use std::process::ExitCode;

use mimn_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("gradient check failed")]
    GradCheck,
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for configuration and input errors, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Config(_) => 2,
            CliError::GradCheck => 1,
            CliError::Core(e) => match e {
                Error::Divergence { .. } => 3,
                Error::Config(_)
                | Error::Parse { .. }
                | Error::EmbeddingDim { .. }
                | Error::Label(_)
                | Error::Format(_)
                | Error::Json(_) => 2,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        };
        ExitCode::from(code)
    }
}
