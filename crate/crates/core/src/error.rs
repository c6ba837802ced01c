use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A requested tolerance could not be met; carries the achieved bound.
    #[error("tolerance {requested:e} unreachable, achieved error bound {achieved:e}")]
    Tolerance { requested: f64, achieved: f64 },
    /// A path produced a non-finite value and was aborted.
    #[error("non-finite state at step {step} (node {node})")]
    NonFinite { step: usize, node: usize },
    /// The scheme does not support the requested configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A least-squares fit could not be formed.
    #[error("fit error: {0}")]
    Fit(String),
    /// A quadrature or refinement sequence failed to converge.
    #[error("divergent: {0}")]
    Divergent(String),
    /// Estimates with incompatible functionals were combined.
    #[error("mismatch: {0}")]
    Mismatch(String),
    /// The p-th energy is undefined for a non-positive mean.
    #[error("undefined energy: mean {0}")]
    UndefinedEnergy(f64),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! domain {
    ($($arg:tt)*) => {
        $crate::error::Error::Domain(alloc::format!($($arg)*))
    };
}
pub(crate) use domain;
