use thiserror::Error;

/// Errors produced by the solver kernels, the oracle, the protocol and the
/// anomaly tooling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A utility was evaluated outside its domain (for example at the pole
    /// of the reciprocal family).
    #[error("domain error: {0}")]
    Domain(String),

    /// The scalar x-update could not bracket a stationary point.
    #[error("scalar solver failure: {0}")]
    SolverFailure(String),

    /// Budget data does not describe a non-empty feasible polytope.
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// Invalid configuration value (non-positive rho, negative delay, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A caller broke a documented precondition (length mismatch,
    /// non-monotone timestamps, infeasible point handed to the KKT check).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Wire-format decoding failure.
    #[error("malformed message: {0}")]
    Malformed(String),

    /// Transport-level failure (socket bind, connection loss, retry budget).
    #[error("transport error: {0}")]
    Transport(String),

    /// Trace file parse failure, with the 1-based line number.
    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
