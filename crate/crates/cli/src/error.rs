use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("validation gate: {0}")]
    Gate(String),
    #[error("run aborted: {0}")]
    Abort(String),
    #[error("bench assertion: {0}")]
    Bench(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Gate(_) => 5,
            CliError::Abort(_) => 6,
            CliError::Bench(_) => 7,
        }
    }
}

impl From<ppko::Error> for CliError {
    fn from(e: ppko::Error) -> Self {
        use ppko::Error as E;
        match e {
            E::Io { .. } | E::Format(_) => CliError::Io(e.to_string()),
            E::NonFiniteLoss { .. } | E::RankDeficient { .. } | E::Numeric(_) | E::Integration { .. } | E::SteadyState(_) => {
                CliError::Numeric(e.to_string())
            }
            E::Domain(_) | E::Contract(_) | E::BasisTooLarge { .. } => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
