use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or out-of-range input parameter.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a domain invariant (Hermiticity, finiteness, support).
    #[error("input error: {0}")]
    Input(String),

    /// The adaptive integrator could not make progress.
    #[error("integration failure at r = {r}: {reason}")]
    Integration { r: f64, reason: String },

    /// A matrix that must be inverted is numerically singular.
    #[error("conditioning error: {what} has condition number {cond:e}")]
    Conditioning { what: String, cond: f64 },

    /// Singular Jost matrix on the real axis.
    #[error("resonance: J(0, k, t) is singular at k = {k}, t = {t} (cond {cond:e})")]
    Resonance { k: f64, t: f64, cond: f64 },

    /// A bound that holds mathematically was violated; this signals a solver bug.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Input(format!("csv: {e}"))
    }
}
