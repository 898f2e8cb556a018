use crate::model::GmmParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical breakdown during fitting or prediction. Carries the last
    /// parameter set that was still valid, when one exists.
    #[error("fit failure: {reason}")]
    FitFailure {
        reason: String,
        last_params: Option<Box<GmmParams>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn fit(reason: impl Into<String>) -> Self {
        Error::FitFailure {
            reason: reason.into(),
            last_params: None,
        }
    }

    pub fn is_fit_failure(&self) -> bool {
        matches!(self, Error::FitFailure { .. })
    }
}
