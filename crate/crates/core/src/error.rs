use std::fmt;

/// Errors produced by model construction, training and evaluation.
#[derive(Debug)]
pub enum Error {
    /// A matrix handed to the Cholesky factorization has a non-positive pivot,
    /// i.e. it is not positive definite.
    NotPositiveDefinite,
    /// A linked parameter, likelihood value or derivative overflowed to a
    /// non-finite number. Carries a short description of where.
    NonFinite(String),
    /// A response vector violates the constraints of the chosen family
    /// (e.g. a compositional response off the simplex).
    InvalidResponse(String),
    /// The requested quantity is not defined for this family.
    Unsupported(&'static str),
    /// The sample covariance of the responses is not positive definite.
    SingularCovariance,
    /// An iterative estimator did not converge within its iteration cap.
    NoConvergence(&'static str),
    /// Prediction features do not match the feature count seen in training.
    FeatureMismatch { expected: usize, got: usize },
    /// A column required to be non-constant is constant.
    ConstantColumn(usize),
    /// A dataset ended up with no rows.
    EmptyDataset,
    /// A cell of an input file failed to parse. Locations are 1-based.
    Parse { row: usize, column: String, message: String },
    /// A configuration value is out of range or inconsistent.
    InvalidConfig(String),
    /// An underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite => write!(f, "matrix is not positive definite"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidResponse(what) => write!(f, "invalid response: {what}"),
            Error::Unsupported(what) => write!(f, "unsupported operation: {what}"),
            Error::SingularCovariance => {
                write!(f, "sample covariance of the responses is singular")
            }
            Error::NoConvergence(what) => write!(f, "no convergence: {what}"),
            Error::FeatureMismatch { expected, got } => {
                write!(f, "feature count mismatch: model expects {expected}, data has {got}")
            }
            Error::ConstantColumn(idx) => write!(f, "column {idx} is constant"),
            Error::EmptyDataset => write!(f, "dataset has no rows"),
            Error::Parse { row, column, message } => {
                write!(f, "parse error at row {row}, column '{column}': {message}")
            }
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
