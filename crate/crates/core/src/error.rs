use alloc::string::String;

/// Errors raised by the design, sampling and estimation kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A column, feature name or dimension does not match what was expected.
    #[error("schema error: {0}")]
    Schema(String),

    /// An input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A treatment arm is empty where an estimate needs both arms.
    #[error("empty arm: {0}")]
    EmptyArm(String),

    /// Thresholding produced an empty stratum (usually massive ties).
    #[error("empty stratum at p_H={p_h}: {detail}")]
    EmptyStratum { p_h: f64, detail: String },

    /// A stratum does not hold enough members for the requested cohort.
    #[error("stratum {stratum} exhausted: need {needed}, have {available}; maximum feasible N is {max_feasible_n}")]
    StratumExhausted {
        stratum: &'static str,
        needed: usize,
        available: usize,
        max_feasible_n: usize,
    },

    /// A cross-fitting fold's training complement lacks a treatment arm.
    #[error("fold {fold}: training complement lacks the {arm} arm")]
    FoldMissingArm { fold: usize, arm: &'static str },

    /// The outcome carries no signal for the requested learner.
    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),
}

pub type Result<T> = core::result::Result<T, Error>;
