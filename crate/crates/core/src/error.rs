use thiserror::Error;

/// Errors raised by validation, fitting, prediction and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at ({row},{col}) in {what}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("n < 2 (got {0} observations)")]
    TooFewObservations(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular normal matrix in {context} (reciprocal condition {rcond:.3e})")]
    Singular { context: String, rcond: f64 },

    #[error("exp overflow in variance model at row {row}")]
    Overflow { row: usize },

    #[error("omega optimizer hit the iteration cap ({iterations}); |grad|_inf = {grad_norm:.3e} at {last:?}")]
    IterationCap {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::Overflow { .. }
            | Error::IterationCap { .. }
            | Error::Factorization(_)
            | Error::Bracket(_) => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
