use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no observations with positive kernel weight near tau = {tau}")]
    EmptyNeighborhood { tau: f64 },

    #[error("empty tail index set for the {side} bound")]
    EmptyTail { side: &'static str },

    #[error("quantile of order {upsilon} is not bracketed by [{lo}, {hi}]")]
    UnbracketedRoot { upsilon: f64, lo: f64, hi: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("fine-tuning failed: every candidate configuration diverged")]
    FineTuneFailed,

    #[error("baseline bounds require Gamma > 1 (got {0}); use the point estimate at Gamma = 1")]
    BaselineGammaGuard(f64),

    #[error("confidence interval unreliable: {skipped} of {total} resamples failed")]
    CiUnreliable { skipped: usize, total: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidParameter(_) | Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::BaselineGammaGuard(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
