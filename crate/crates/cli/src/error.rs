use sws_core::data::DataError;
use sws_core::expand::ExpandError;
use sws_core::sharing::SharingError;
use sws_core::store::StoreError;
use sws_core::train::TrainError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("stale teacher cache: {0}")]
    StaleCache(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub const EXIT_CODES: &'static str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid configuration or arguments
  3  I/O failure
  4  malformed artifact or dataset file
  5  training diverged (non-finite loss or gradient)
  6  teacher-logit cache does not match the training data";

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Format(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::StaleCache(_) => 6,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            DataError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } | TrainError::NonFiniteGrad { .. } => CliError::Divergence(e.to_string()),
            TrainError::StaleCache { .. } => CliError::StaleCache(e.to_string()),
            TrainError::Config(_) | TrainError::Label { .. } | TrainError::EmptySplit => {
                CliError::Config(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ExpandError> for CliError {
    fn from(e: ExpandError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SharingError> for CliError {
    fn from(e: SharingError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
