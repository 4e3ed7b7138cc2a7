use thiserror::Error;

/// Failure of a CLI run, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or invalid configuration, bad parameters, unwritable output.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical check failed or a computation broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<bridgesim::Error> for CliError {
    fn from(e: bridgesim::Error) -> Self {
        use bridgesim::Error as E;
        match e {
            E::InvalidParameter(_) | E::DimensionMismatch { .. } | E::InvalidGrid(_) | E::Config(_) | E::Io(_) => {
                CliError::Config(e.to_string())
            }
            E::NotInjective { .. } | E::SingularObservation { .. } | E::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o error: {e}"))
    }
}
