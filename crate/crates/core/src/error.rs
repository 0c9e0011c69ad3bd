use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmrError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_finite: Box<crate::nn_solver::MlpParams>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MmrError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        MmrError::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        MmrError::Numerical(msg.into())
    }

    /// True for errors raised by a failed factorization or a divergent iteration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, MmrError::Numerical(_) | MmrError::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, MmrError>;
