use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("singular matrix (condition estimate {cond:.3e})")]
    Singular { cond: f64 },

    #[error("ZF ill-posed: condition of X X^H is {cond:.3e}")]
    ZfIllPosed { cond: f64 },

    #[error("rank-deficient pilot matrix (condition of P P^H is {cond:.3e})")]
    RankDeficientPilots { cond: f64 },

    #[error("all-zero channel")]
    ZeroChannel,

    #[error("pilot power of user {user} is {power:.6e} W, exceeding budget {budget:.6e} W")]
    PilotPower { user: usize, power: f64, budget: f64 },

    #[error("power multiplier bisection failed: bracket [{low:.3e}, {high:.3e}] residual {residual:.3e}")]
    Bracket { low: f64, high: f64, residual: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("gradient requested for a value that is not on the tape")]
    NotOnTape,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::DimensionMismatch { op, left, right }
    }
}
