use partmle::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("input error: {0}")]
    Input(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("optimizer did not converge after {0} evaluations")]
    NotConverged(usize),
    #[error("audit found {0} violation(s)")]
    AuditFailed(usize),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1: non-convergence or failed audit, 3: protocol failure, 2: everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NotConverged(_) | CliError::AuditFailed(_) => 1,
            CliError::Core(Error::ProtocolAborted(_) | Error::TransportTimeout { .. } | Error::ProtocolOrder(_)) => 3,
            _ => 2,
        }
    }
}
