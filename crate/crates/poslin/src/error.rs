use thiserror::Error;

/// Errors surfaced by the solver and the conversions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("E is numerically singular (condition estimate {cond:.3e})")]
    SingularE { cond: f64 },

    #[error("invalid action {action} for state {state} with {arity} inputs")]
    BadAction {
        state: usize,
        action: usize,
        arity: usize,
    },

    #[error(
        "value iteration did not converge within {max_iter} iterations \
         (residual {residual:.3e}); the value may be infinite"
    )]
    NoConvergence { max_iter: usize, residual: f64 },

    #[error("policy is not Schur stable (spectral radius estimate {rho:.6})")]
    UnstablePolicy { rho: f64 },

    #[error("policy enumeration size {count} exceeds cap {cap}")]
    TooLarge { count: u128, cap: u128 },

    #[error("no stable policy exists")]
    Infeasible,

    #[error("no single policy attains the elementwise minimal cost")]
    NoMinimizingPolicy,

    #[error("instance has no initial policy k_hat")]
    MissingInitialPolicy,

    #[error("beta undefined: r[{index}] = 0 but (B' h_upper)[{index}] = {value:.3e} > 0")]
    BetaUndefined { index: usize, value: f64 },

    #[error("closed loop is not column substochastic (worst column sum {worst:.6})")]
    NotSubstochastic { worst: f64 },

    #[error("zero-cost action {action} at non-goal state {state}")]
    ZeroCostNonGoal { state: String, action: usize },

    #[error("E must be the identity for this conversion (apply normalize_e first)")]
    ENotIdentity,

    #[error("invalid SSP: {0}")]
    InvalidSsp(String),
}

pub type Result<T> = std::result::Result<T, Error>;
