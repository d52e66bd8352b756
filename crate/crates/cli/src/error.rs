use mbsaem::analysis::AnalysisError;
use mbsaem::datafile::DataError;
use mbsaem::engine::EngineError;
use mbsaem::experiment::ExperimentError;
use mbsaem::ModelError;
use thiserror::Error;

/// Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidParameter(_) | ModelError::InvalidDesign(_) => CliError::Usage(e.to_string()),
            ModelError::Dimension { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Usage(e.to_string()),
            EngineError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(_) => CliError::Data(e.to_string()),
            AnalysisError::InsufficientReplicates { .. } | AnalysisError::NoAlpha | AnalysisError::Invalid(_) => {
                CliError::Usage(e.to_string())
            }
            AnalysisError::Ragged => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Usage(e.to_string()),
            ExperimentError::Engine(e) => e.into(),
            ExperimentError::Model(e) => e.into(),
            ExperimentError::Analysis(e) => e.into(),
            ExperimentError::TooManyFailures { .. } => CliError::Numerical(e.to_string()),
        }
    }
}
