use thiserror::Error;

/// Errors from model construction, data handling, training, and I/O.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("{symbol}: expected shape {expected:?}, got {got:?}")]
    Shape {
        symbol: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error(transparent)]
    Tensor(#[from] hyperst_tensor::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NetError {
    /// True for errors caused by bad user input (config, data files, CLI
    /// arguments) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            NetError::Shape { .. } | NetError::Config(_) | NetError::Data(_)
        )
    }
}
