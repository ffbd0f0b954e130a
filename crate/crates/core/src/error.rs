use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or a violated modelling hypothesis.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("coefficient model error: {0}")]
    Model(String),

    #[error("{solver} solver became unstable at step {step} (t = {time})")]
    Instability {
        solver: &'static str,
        step: usize,
        time: f64,
    },

    #[error(
        "{solver} solver produced negativity {min:e} (max {max:e}) at step {step} (t = {time})"
    )]
    SchemeFailure {
        solver: &'static str,
        step: usize,
        time: f64,
        min: f64,
        max: f64,
    },

    #[error("non-finite value in Monte-Carlo path {path} at step {step}")]
    PathBlowup { path: usize, step: usize },

    #[error("sweep iteration {iteration}: {source}")]
    Sweep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the error stems from loading or validating input rather than solving.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
