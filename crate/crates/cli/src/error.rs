use svs_aug::augment::AugmentError;
use svs_aug::dsp::DspError;
use svs_aug::metrics::MetricsError;
use svs_aug::score_io::ScoreError;
use svs_aug::training::TrainError;
use thiserror::Error;

/// Command failure, classified by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable, missing or inconsistent data (exit 2).
    #[error("{0}")]
    Data(String),
    /// Non-finite loss or gradient during training (exit 3).
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        CliError::Data(m.into())
    }

    pub fn usage(m: impl Into<String>) -> Self {
        CliError::Usage(m.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(AugmentError, DspError, MetricsError, ScoreError, std::io::Error, serde_json::Error);

/// Attaches a path to an I/O style error.
pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl std::fmt::Display) -> Result<T> {
        self.map_err(|e| match e.into() {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(m),
        })
    }
}
