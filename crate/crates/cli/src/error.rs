use thiserror::Error;

/// Errors surfaced to the shell, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("schema error: {0}")]
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
        }
    }

    /// Treats every failure as a problem with a supplied input file.
    pub fn input(e: avprune::Error) -> Self {
        match e {
            avprune::Error::Infeasible(m) => CliError::Infeasible(m),
            avprune::Error::Schema(m) => CliError::Schema(m),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<avprune::Error> for CliError {
    fn from(e: avprune::Error) -> Self {
        use avprune::Error as E;
        match e {
            E::InvalidInput(m) => CliError::Config(m),
            E::Infeasible(m) => CliError::Infeasible(m),
            E::Io(e) => CliError::Io(e.to_string()),
            E::Schema(m) => CliError::Schema(m),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
