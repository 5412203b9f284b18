use thiserror::Error;

/// Driver failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or an invalid configuration document.
    #[error("usage error: {0}")]
    Usage(String),

    /// Missing, unreadable or malformed input data.
    #[error("data error: {0}")]
    Data(String),

    /// A checked invariant of the run did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<dopq_core::Error> for CliError {
    fn from(e: dopq_core::Error) -> Self {
        use dopq_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) => CliError::Usage(e.to_string()),
            E::Dimension(_) | E::Domain(_) | E::Format(_) | E::Io(_) | E::Json(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
