use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("matrix `{matrix}` is numerically singular (condition number {condition:.3e})")]
    Singular { matrix: String, condition: f64 },

    #[error("unsupported regime: likelihood ratio needs N > T, got N = {n}, T = {t}")]
    UnsupportedRegime { n: usize, t: usize },

    #[error("configuration is not identifiable: {0}")]
    Unidentifiable(String),

    #[error("objective is not finite at the initial point")]
    InvalidInit,

    #[error("{groupings} candidate groupings exceed the cap of {cap}; reduce the grid or the peak count")]
    TooManyGroupings { groupings: usize, cap: usize },

    #[error("RIS element {element}: {source}")]
    Element {
        element: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn singular(matrix: impl Into<String>, condition: f64) -> Self {
        Error::Singular {
            matrix: matrix.into(),
            condition,
        }
    }
}
