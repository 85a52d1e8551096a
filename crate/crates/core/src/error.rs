use thiserror::Error;

/// Errors surfaced by the merging stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("nothing to sequence: the scenario has no vehicles")]
    EmptyScenario,

    #[error("infeasible assignment: {0}")]
    InfeasibleAssignment(String),

    #[error("enumeration guard exceeded: m + r = {requested} > {limit}")]
    EnumerationTooLarge { requested: usize, limit: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Hessian is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("steering angle {0} rad is too close to ±π/2")]
    SteeringSingular(f64),

    #[error("acceleration profile: {0}")]
    Profile(String),

    #[error("non-finite state for CAV {cav} at step {step}")]
    NonFinite { cav: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
