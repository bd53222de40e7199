use egue_core::analytic::AnalyticError;
use egue_core::ensembles::EnsembleError;
use egue_core::fock::FockError;
use egue_core::montecarlo::McError;
use egue_core::oracle::OracleError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Other(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<FockError> for CliError {
    fn from(e: FockError) -> Self {
        match e {
            FockError::CapExceeded { .. } => CliError::Infeasible(e.to_string()),
            FockError::InvalidParameters { n, .. } if n > egue_core::fock::MAX_MODES as i64 => {
                CliError::Infeasible(format!("{e}: at most {} modes fit the state encoding", egue_core::fock::MAX_MODES))
            }
            FockError::InvalidParameters { .. } => CliError::Validation(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::InvalidSpec(msg) => CliError::Validation(msg),
            EnsembleError::Fock(f) => f.into(),
        }
    }
}

impl From<AnalyticError> for CliError {
    fn from(e: AnalyticError) -> Self {
        match e {
            AnalyticError::Spec(s) => s.into(),
            AnalyticError::InvalidGrid(_) | AnalyticError::InvalidRacah(_) => CliError::Validation(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Infeasible(msg) => CliError::Infeasible(msg),
            OracleError::Ensemble(s) => s.into(),
            OracleError::Analytic(a) => a.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::CapExceeded { .. } => CliError::Infeasible(e.to_string()),
            McError::TooFewSamples(_) | McError::NoBins => CliError::Validation(e.to_string()),
            McError::Ensemble(s) => s.into(),
            McError::Analytic(a) => a.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}
