use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or unreadable configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] qreg_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Some jobs of a multi-job command failed; the rest were written.
    #[error("{failed} of {total} jobs failed; see failures.csv")]
    JobsFailed { failed: usize, total: usize },
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for everything
    /// that happens once runs start.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
