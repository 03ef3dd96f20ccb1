use thiserror::Error;

/// Errors raised by the simulation core.
///
/// Display strings are stable identifiers; the CLI and the tests match on them.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("empty-history")]
    EmptyHistory,
    #[error("out-of-domain")]
    OutOfDomain,
    #[error("degenerate-vector")]
    DegenerateVector,
    #[error("shape-mismatch")]
    ShapeMismatch,
    #[error("no-cached-input")]
    NoCachedInput,
    #[error("no-replicas")]
    NoReplicas,
    #[error("non-finite-gradient")]
    NonFiniteGradient,
    #[error("missing-attack-context")]
    MissingAttackContext,
    #[error("not-warmed-up")]
    NotWarmedUp,
    #[error("already-banned")]
    AlreadyBanned,
    #[error("insufficient-warmup")]
    InsufficientWarmup,
    #[error("stage-starved")]
    StageStarved,
    #[error("infeasible-constants")]
    InfeasibleConstants,
    #[error("honest-majority-violated")]
    HonestMajorityViolated,
    #[error("not-enough-trainers")]
    NotEnoughTrainers,
    #[error("invalid-parameter: {0}")]
    InvalidParameter(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
