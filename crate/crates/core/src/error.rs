use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no minimizer available: {0}")]
    NoMinimizer(String),

    #[error("closed-form LQR argmin requires a diagonal control weight")]
    NonDiagonalR,

    #[error("gradient norm {norm:e} below tolerance; fallback angle {fallback}")]
    DegenerateGradient { norm: f64, fallback: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("terminal condition sensor layout does not match the operator network")]
    SensorMismatch,

    #[error("collocation set is empty")]
    EmptyCollocation,

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },

    #[error("viscosity constant N = {n} is below max(1, |f|_inf / 2) = {required}")]
    NViolatesMonotonicityBound { n: f64, required: f64 },

    #[error("empty residual sequence")]
    EmptySequence,

    #[error("time step {dt} exceeds the stability bound {bound}")]
    UnstableSpec { dt: f64, bound: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),

    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),

    #[error("oracle `{oracle}` is not applicable: {reason}")]
    OracleInapplicable { oracle: String, reason: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
