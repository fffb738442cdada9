use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} is not a grid point")]
    OffGrid { t: f64 },

    #[error("conditional density degenerates at t = {t} (insider horizon {horizon})")]
    Degenerate { t: f64, horizon: f64 },

    #[error("conditional density {value:e} below floor at z = {z}: far-tail z")]
    FarTail { z: f64, value: f64 },

    #[error("mark {mark} is not in the mark support")]
    UnknownMark { mark: f64 },

    #[error("non-finite state at step {step} (scenario {scenario})")]
    BlowUp { step: usize, scenario: usize },

    #[error("quadrature health check failed: imaginary residue {residue:e}")]
    Quadrature { residue: f64 },

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("no sign change of the budget function on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("non-positive wealth {value} at step {step} (scenario {scenario})")]
    NonPositiveWealth { value: f64, step: usize, scenario: usize },

    #[error("refused: {0}")]
    Refused(String),

    #[error("config: `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
