use thiserror::Error;

/// Errors produced while validating, solving, simulating or verifying a game.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("`{field}` is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { field: String, asymmetry: f64 },

    #[error("`{field}` violates definiteness: eigenvalue {eigenvalue:e} below {bound:e}")]
    Definiteness {
        field: String,
        eigenvalue: f64,
        bound: f64,
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("ill-posed stage game for player {player} at stage {stage}: Hessian eigenvalue {eigenvalue:e} is not negative")]
    IllPosedStage {
        player: usize,
        stage: usize,
        eigenvalue: f64,
    },

    #[error("stage fixed point singular at stage {stage} ({block} system)")]
    StageSingular { stage: usize, block: &'static str },

    #[error("numerical failure at player {player}, stage {stage}: {reason}")]
    Numerical {
        player: usize,
        stage: usize,
        reason: String,
    },

    #[error("missing public recursion data for stage {stage}")]
    MissingStage { stage: usize },

    #[error("dimension guard exceeded: joint Gaussian of size {size} > {limit}")]
    DimensionGuard { size: usize, limit: usize },

    #[error("oracle precondition failed: {0}")]
    OraclePrecondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
